// Named parameter storage and seeded initialization.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rapnet/autodiff.hpp"

namespace rapnet {

/// Uniform draws in [0, 1) built directly from the engine bits so that
/// initialization does not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next() { return engine_(); }
  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * n) % n; }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

/// Ordered map of parameter name to leaf Var. Names are dotted paths; the
/// first two components form the parameter group ("layer0.rab_x").
template <class T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value) {
    if (params_.count(name)) throw ValidationError("duplicate parameter " + name);
    return params_.emplace(name, Var<T>::parameter(std::move(value))).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Var<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter " + name);
    return it->second;
  }

  const std::map<std::string, Var<T>>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().size();
    return n;
  }

  std::set<std::string> groups() const {
    std::set<std::string> out;
    for (const auto& [name, _] : params_) out.insert(group_of(name));
    return out;
  }

  static std::string group_of(const std::string& name) {
    auto first = name.find('.');
    if (first == std::string::npos) return name;
    auto second = name.find('.', first + 1);
    return second == std::string::npos ? name : name.substr(0, second);
  }

  void zero_grad() const {
    for (const auto& [_, v] : params_) v.zero_grad();
  }

  /// Deep copy of the values; the copy has its own leaves.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, v] : params_) out.add(name, v.value());
    return out;
  }

  /// Copy whose leaves do not require gradients; forward passes build no graph.
  ParamStore frozen() const {
    ParamStore out;
    for (const auto& [name, v] : params_) out.params_.emplace(name, Var<T>::constant(v.value()));
    return out;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, v] : params_) out.add(name, v.value().template cast<U>());
    return out;
  }

  /// Overwrites every value in place with those of `other` (same names).
  void assign(const ParamStore& other) {
    for (auto& [name, v] : params_) v.mutable_value() = other.get(name).value();
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (const auto& [name, v] : a.params_) {
      if (!b.contains(name) || !(v.value() == b.get(name).value())) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Var<T>> params_;
};

/// Conv weight [co, ci, k, k] and bias [co], both U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
void add_conv(ParamStore<T>& store, Rng& rng, const std::string& prefix, int co, int ci, int k,
              bool with_bias = true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
  Tensor<T> w(Shape{co, ci, k, k});
  for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  store.add(prefix + ".weight", std::move(w));
  if (with_bias) {
    Tensor<T> b(Shape{co});
    for (auto& v : b.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    store.add(prefix + ".bias", std::move(b));
  }
}

/// Weight/bias pair of one convolution, looked up from a store.
template <class T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;

  static ConvParams bind(const ParamStore<T>& store, const std::string& prefix) {
    ConvParams p;
    p.weight = store.get(prefix + ".weight");
    if (store.contains(prefix + ".bias")) p.bias = store.get(prefix + ".bias");
    return p;
  }

  int out_channels() const { return weight.dim(0); }
  int kernel() const { return weight.dim(2); }
};

}  // namespace rapnet
