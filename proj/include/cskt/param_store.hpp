#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cskt/error.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

struct ParamRef {
  std::size_t index = 0;
  friend bool operator==(ParamRef, ParamRef) = default;
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool frozen = true;
};

/// Named parameters in insertion order, split into frozen and trainable.
/// A tensor's requires_grad flag always mirrors !frozen.
class ParamStore {
 public:
  ParamRef add(std::string name, Tensor tensor, bool frozen) {
    require(!index_.contains(name), ErrorKind::Integrity, "duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(!frozen);
    tensor.clear_grad();
    const ParamRef ref{entries_.size()};
    index_.emplace(name, ref.index);
    entries_.push_back(ParamEntry{std::move(name), std::move(tensor), frozen});
    return ref;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  ParamEntry& entry(ParamRef ref) { return entries_.at(ref.index); }
  const ParamEntry& entry(ParamRef ref) const { return entries_.at(ref.index); }
  Tensor& tensor(ParamRef ref) { return entries_.at(ref.index).tensor; }
  const Tensor& tensor(ParamRef ref) const { return entries_.at(ref.index).tensor; }

  std::optional<ParamRef> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return ParamRef{it->second};
  }

  ParamRef ref(const std::string& name) const {
    auto found = find(name);
    require(found.has_value(), ErrorKind::Integrity, "unknown parameter '" + name + "'");
    return *found;
  }

  Tensor& operator[](const std::string& name) { return tensor(ref(name)); }
  const Tensor& operator[](const std::string& name) const { return tensor(ref(name)); }

  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  void clear_grads() noexcept {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace cskt
