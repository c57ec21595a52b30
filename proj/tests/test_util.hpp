// Small conversions and random inputs shared by the test programs.
#pragma once

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "oracles/oracles.hpp"
#include "rapnet/tensor.hpp"
#include "rapnet/autodiff.hpp"

namespace testutil {

using rapnet::Shape;
using rapnet::Tensor;
using rapnet::Var;

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& gen, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = d(gen);
  return t;
}

inline Var<double> cvar(const Tensor<double>& t) { return Var<double>::constant(t); }

template <class T>
std::vector<double> to_vec(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

template <class T>
std::vector<double> to_vec(const Var<T>& v) {
  return to_vec(v.value());
}

/// Fails with the first differing index when the oracle disagrees.
inline ::testing::AssertionResult matches(const oracle::OracleResult& r) {
  if (r.pass) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "max abs diff " << r.max_abs_diff << " > " << r.tolerance
                                       << ", first at index " << r.first_diff;
}

inline ::testing::AssertionResult matches(const std::vector<double>& expected,
                                          const std::vector<double>& actual, double tol) {
  return matches(oracle::compare(expected, actual, tol));
}

}  // namespace testutil
