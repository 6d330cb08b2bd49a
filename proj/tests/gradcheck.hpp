#pragma once

// Gradient-check cases shared by the unit tests and the acceptance binary:
// every differentiable tape op on small random inputs.

#include "test_util.hpp"

namespace gradcheck {

using mesograph::Matrix;
using testutil::random_matrix;
using testutil::weighted_sum;
namespace ad = mesograph::ad;

// Push entries away from 0 so kinked ops are differentiable at the probe.
inline Matrix away_from_zero(Matrix m) {
  for (double& v : m.values())
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
  return m;
}

struct OpCase {
  const char* name;
  std::function<std::vector<Matrix>(std::mt19937_64&)> inputs;
  testutil::ScalarFn f;
};

inline std::vector<OpCase> op_cases() {
  auto unary = [](auto op) {
    return [op](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, op(v[0]), 11); };
  };
  auto two = [](std::size_t r, std::size_t c) {
    return [r, c](std::mt19937_64& rng) {
      return std::vector<Matrix>{random_matrix(r, c, rng), random_matrix(r, c, rng)};
    };
  };
  auto one = [](std::size_t r, std::size_t c) {
    return [r, c](std::mt19937_64& rng) { return std::vector<Matrix>{away_from_zero(random_matrix(r, c, rng))}; };
  };
  std::vector<OpCase> cs;
  cs.push_back({"matmul",
                [](std::mt19937_64& rng) {
                  return std::vector<Matrix>{random_matrix(4, 3, rng), random_matrix(3, 10, rng)};
                },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::matmul(v[0], v[1]), 1); }});
  cs.push_back({"matmul_generic",
                [](std::mt19937_64& rng) {
                  return std::vector<Matrix>{random_matrix(5, 7, rng), random_matrix(7, 3, rng)};
                },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::matmul(v[0], v[1]), 2); }});
  cs.push_back({"matmul_vector",
                [](std::mt19937_64& rng) {
                  return std::vector<Matrix>{random_matrix(6, 10, rng), random_matrix(10, 1, rng)};
                },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::matmul(v[0], v[1]), 3); }});
  cs.push_back({"transpose", one(3, 4), unary([](ad::Var x) { return ad::transpose(x); })});
  cs.push_back({"slice_rows", one(5, 3), unary([](ad::Var x) { return ad::slice_rows(x, 1, 3); })});
  cs.push_back({"add_bias",
                [](std::mt19937_64& rng) { return std::vector<Matrix>{random_matrix(4, 3, rng), random_matrix(1, 3, rng)}; },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::add_bias(v[0], v[1]), 4); }});
  cs.push_back({"add", two(3, 3), [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::add(v[0], v[1]), 5); }});
  cs.push_back({"sub", two(3, 3), [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::sub(v[0], v[1]), 6); }});
  cs.push_back({"mul", two(3, 3), [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::mul(v[0], v[1]), 7); }});
  cs.push_back({"relu", one(4, 4), unary([](ad::Var x) { return ad::relu(x); })});
  cs.push_back({"hinge", one(4, 4), unary([](ad::Var x) { return ad::hinge(x); })});
  cs.push_back({"sigmoid", one(4, 4), unary([](ad::Var x) { return ad::sigmoid(x); })});
  cs.push_back({"log",
                [](std::mt19937_64& rng) {
                  Matrix m = random_matrix(3, 3, rng);
                  for (double& v : m.values()) v = std::abs(v) + 0.5;
                  return std::vector<Matrix>{m};
                },
                unary([](ad::Var x) { return ad::log(x); })});
  cs.push_back({"square", one(3, 3), unary([](ad::Var x) { return ad::square(x); })});
  cs.push_back({"mul_scalar", one(3, 3), unary([](ad::Var x) { return ad::mul_scalar(x, -1.7); })});
  cs.push_back({"affine", one(3, 3), unary([](ad::Var x) { return ad::affine(x, 0.3, 2.0); })});
  cs.push_back({"scale_by",
                [](std::mt19937_64& rng) { return std::vector<Matrix>{random_matrix(4, 1, rng), random_matrix(1, 1, rng)}; },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::scale_by(v[0], v[1]), 8); }});
  cs.push_back({"shift_by",
                [](std::mt19937_64& rng) { return std::vector<Matrix>{random_matrix(4, 2, rng), random_matrix(1, 1, rng)}; },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::shift_by(v[0], v[1]), 9); }});
  cs.push_back({"mul_row",
                [](std::mt19937_64& rng) { return std::vector<Matrix>{random_matrix(4, 3, rng), random_matrix(1, 3, rng)}; },
                [](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted_sum(t, ad::mul_row(v[0], v[1]), 10); }});
  cs.push_back({"concat_cols",
                [](std::mt19937_64& rng) {
                  return std::vector<Matrix>{random_matrix(3, 2, rng), random_matrix(3, 4, rng), random_matrix(3, 1, rng)};
                },
                [](ad::Tape& t, const std::vector<ad::Var>& v) {
                  return weighted_sum(t, ad::concat_cols({v[0], v[1], v[2]}), 12);
                }});
  cs.push_back({"mean_rows", one(5, 3), unary([](ad::Var x) { return ad::mean_rows(x); })});
  cs.push_back({"sum", one(3, 4), [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sum(v[0]); }});
  cs.push_back({"mean_all", one(3, 4), [](ad::Tape& t, const std::vector<ad::Var>& v) {
                  return ad::mean_all(ad::mul(v[0], t.constant(Matrix(3, 4, 0.7))));
                }});
  cs.push_back({"gather_rows", one(4, 3), unary([](ad::Var x) {
                  static const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
                  return ad::gather_rows(x, idx);
                })});
  cs.push_back({"segment_mean", one(6, 2), unary([](ad::Var x) {
                  static const std::vector<std::size_t> seg{0, 2, 2, 0, 2, 3};
                  return ad::segment_mean(x, seg, 4);
                })});
  auto rmm = [](std::size_t width) {
    return OpCase{width == 10 ? "relu_message_mean_w10" : "relu_message_mean_w3",
                  [width](std::mt19937_64& rng) {
                    return std::vector<Matrix>{random_matrix(4, width, rng), random_matrix(4, width, rng)};
                  },
                  [](ad::Tape& t, const std::vector<ad::Var>& v) {
                    // node 3 is isolated and gets its self message
                    static const std::vector<std::size_t> off{0, 2, 4, 5, 6};
                    static const std::vector<std::size_t> src{1, 2, 0, 2, 0, 3};
                    return weighted_sum(t, ad::relu_message_mean(v[0], v[1], off, src), 13);
                  }};
  };
  cs.push_back(rmm(3));
  cs.push_back(rmm(10));
  cs.push_back({"ranking_hinge",
                [](std::mt19937_64& rng) { return std::vector<Matrix>{random_matrix(5, 1, rng, 0.3)}; },
                [](ad::Tape&, const std::vector<ad::Var>& v) {
                  static const std::vector<int> y{0, 2, 1, 1, 0};
                  return ad::ranking_hinge(v[0], y);
                }});
  return cs;
}

}  // namespace gradcheck
