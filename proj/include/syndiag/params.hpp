#pragma once

#include <string>
#include <utility>
#include <vector>

#include "syndiag/autodiff.hpp"
#include "syndiag/hashing.hpp"

namespace syndiag {

// Named, ordered set of parameter leaves. A model is partitioned into
// groups (frozen base, prompts, lora, head, ...) so that freeze discipline
// can be proven by content hash before and after a training stage.
class ParamGroup {
 public:
  ParamGroup() = default;
  explicit ParamGroup(std::string name) : name_(std::move(name)) {}

  Var add(const std::string& key, Tensor init, bool trainable) {
    Var v = trainable ? Var::parameter(std::move(init)) : Var::constant(std::move(init));
    items_.emplace_back(key, v);
    return v;
  }

  void add_existing(const std::string& key, const Var& v) { items_.emplace_back(key, v); }

  Var find(const std::string& key) const {
    for (const auto& [k, v] : items_)
      if (k == key) return v;
    throw std::invalid_argument("param group '" + name_ + "': no item '" + key + "'");
  }

  const std::string& name() const { return name_; }
  size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(items_.size());
    for (const auto& [k, v] : items_) out.push_back(v);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : items_) n += v.value().numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& [k, v] : items_) v.set_requires_grad(trainable);
  }

  void zero_grad() {
    for (auto& [k, v] : items_) v.zero_grad();
  }

  // Content hash over names, shapes and raw f64 values.
  std::string content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : items_) {
      h = fnv1a64(k.data(), k.size(), h);
      for (int64_t e : v.value().shape()) h = fnv1a64(&e, sizeof(e), h);
      h = fnv1a64(v.value().vec(), h);
    }
    return hash_hex(h);
  }

  // Deep copy: fresh leaves with identical values and trainability.
  ParamGroup clone() const {
    ParamGroup g(name_);
    for (const auto& [k, v] : items_) g.add(k, v.value(), v.requires_grad());
    return g;
  }

  void copy_values_from(const ParamGroup& other) {
    if (other.items_.size() != items_.size())
      throw std::invalid_argument("param group copy: size mismatch");
    for (size_t i = 0; i < items_.size(); ++i) {
      if (!items_[i].second.value().same_shape(other.items_[i].second.value()))
        throw std::invalid_argument("param group copy: shape mismatch at " + items_[i].first);
      items_[i].second.mutable_value() = other.items_[i].second.value();
    }
  }

 private:
  std::string name_;
  std::vector<std::pair<std::string, Var>> items_;
};

inline void append_vars(std::vector<Var>& dst, const ParamGroup& g) {
  for (const auto& [k, v] : g.items()) dst.push_back(v);
}

}  // namespace syndiag
