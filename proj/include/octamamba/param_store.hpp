#pragma once

// Ordered, named collection of model tensors. Trainable entries carry
// requires_grad; buffers (running statistics, input standardization) do not.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "octamamba/rng.hpp"
#include "octamamba/tensor.hpp"

namespace octamamba {

enum class ParamKind { Trainable, Buffer };

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamKind kind;
  };

  Tensor<T> add(const std::string& name, Tensor<T> t, ParamKind kind = ParamKind::Trainable) {
    if (find(name)) throw Error("duplicate parameter name: " + name);
    t.set_requires_grad(kind == ParamKind::Trainable);
    entries_.push_back({name, t, kind});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  const Entry* find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const Entry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
  }

  Tensor<T> at(const std::string& name) const {
    const Entry* e = find(name);
    if (!e) throw Error("unknown parameter: " + name);
    return e->tensor;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.kind == ParamKind::Trainable) out.push_back(e.tensor);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Copies of every tensor's values, in entry order.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor.vec());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != entries_.size()) throw Error("restore: entry count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto dst = entries_[i].tensor.data();
      if (values[i].size() != dst.size()) throw ShapeError("restore: size mismatch for " + entries_[i].name);
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// Number of trainable scalars; buffers are excluded.
template <typename T>
std::size_t param_count(const ParamStore<T>& store) {
  std::size_t n = 0;
  for (const auto& e : store.entries())
    if (e.kind == ParamKind::Trainable) n += e.tensor.numel();
  return n;
}

/// Hierarchical naming and initialization helper used while building modules.
template <typename T>
class ParamScope {
 public:
  ParamScope(ParamStore<T>& store, Rng& rng, std::string prefix = "")
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamScope sub(const std::string& name) const {
    return ParamScope(*store_, *rng_, qualified(name));
  }

  /// Weight with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the
  /// product of all dims after the first.
  Tensor<T> weight(const std::string& name, Shape shape) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return uniform(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
  }

  Tensor<T> uniform(const std::string& name, Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng_->uniform(-bound, bound));
    return store_->add(qualified(name), t);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value,
                     ParamKind kind = ParamKind::Trainable) {
    return store_->add(qualified(name), Tensor<T>::full(std::move(shape), value), kind);
  }

  Tensor<T> adopt(const std::string& name, Tensor<T> t) { return store_->add(qualified(name), t); }

  Rng& rng() { return *rng_; }

 private:
  std::string qualified(const std::string& name) const {
    return prefix_.empty() ? name : prefix_ + "." + name;
  }

  ParamStore<T>* store_;
  Rng* rng_;
  std::string prefix_;
};

}  // namespace octamamba
