// SPDX-License-Identifier: Apache-2.0
//
// Randomised gradient cases shared by the unit tests and the acceptance run.
// Each returns the worst relative error of an analytic backward pass against
// central differences from finite_diff.hpp.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "oracle/finite_diff.hpp"
#include "rnnquant/cells.hpp"
#include "rnnquant/model.hpp"

namespace oracle {

using rnnquant::Activation;
using rnnquant::Matrix;
using rnnquant::Rng;

template <typename Params>
std::vector<Matrix*> tensors(Params& p) {
  std::vector<Matrix*> out;
  Params::visit(p, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

template <typename Params>
std::vector<const Matrix*> tensors(const Params& p) {
  std::vector<const Matrix*> out;
  Params::visit(p, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

// Worst relative error of analytic parameter and input gradients against
// central differences of `loss`, which must read params/inputs by reference.
template <typename Params>
double worst_error(Params& params, const Params& grads, std::vector<Matrix*> inputs,
                   std::vector<const Matrix*> input_grads, const std::function<double()>& loss,
                   double eps = 1e-5) {
  double worst = 0.0;
  auto ps = tensors(params);
  auto gs = tensors(grads);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    worst = std::max(worst, max_rel_error(*gs[i], central_diff(*ps[i], loss, eps)));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    worst = std::max(worst,
                     max_rel_error(*input_grads[i], central_diff(*inputs[i], loss, eps)));
  }
  return worst;
}

template <typename Params>
void randomise_biases(Params& p, Rng& rng) {
  Params::visit(p, [&](const std::string& name, Matrix& m) {
    if (name.ends_with("bias")) m = random_matrix(m.rows(), 1, rng, 0.5);
  });
}

inline double gru_case_error(std::size_t h, std::size_t x, std::uint64_t seed) {
  Rng rng(seed);
  rnnquant::GruParams p = rnnquant::GruParams::glorot(h, x, rng);
  randomise_biases(p, rng);
  Matrix xt = random_matrix(x, 1, rng);
  Matrix hp = random_matrix(h, 1, rng);
  const Matrix w = projection(h, rng);
  auto loss = [&] { return dot(w, rnnquant::gru_forward(xt, hp, p).h); };
  const auto step = rnnquant::gru_forward(xt, hp, p);
  const auto back = rnnquant::gru_backward(w, step.cache, p);
  return worst_error(p, back.grads, {&hp, &xt}, {&back.dh_prev, &back.dx}, loss);
}

inline double lstm_case_error(std::size_t h, std::size_t x, std::uint64_t seed) {
  Rng rng(seed);
  rnnquant::LstmParams p = rnnquant::LstmParams::glorot(h, x, rng);
  randomise_biases(p, rng);
  Matrix xt = random_matrix(x, 1, rng);
  Matrix hp = random_matrix(h, 1, rng);
  Matrix cp = random_matrix(h, 1, rng, 2.0);
  const Matrix wh = projection(h, rng);
  const Matrix wc = projection(h, rng);
  auto loss = [&] {
    const auto s = rnnquant::lstm_forward(xt, hp, cp, p);
    return dot(wh, s.h) + dot(wc, s.c);
  };
  const auto step = rnnquant::lstm_forward(xt, hp, cp, p);
  const auto back = rnnquant::lstm_backward(wh, wc, step.cache, p);
  return worst_error(p, back.grads, {&hp, &cp, &xt}, {&back.dh_prev, &back.dc_prev, &back.dx},
                     loss);
}

inline double rnn_case_error(std::size_t h, std::size_t x, std::uint64_t seed) {
  Rng rng(seed);
  rnnquant::RnnParams p = rnnquant::RnnParams::glorot(h, x, rng);
  randomise_biases(p, rng);
  Matrix xt = random_matrix(x, 1, rng);
  Matrix hp = random_matrix(h, 1, rng);
  const Matrix w = projection(h, rng);
  auto loss = [&] { return dot(w, rnnquant::rnn_forward(xt, hp, p).h); };
  const auto step = rnnquant::rnn_forward(xt, hp, p);
  const auto back = rnnquant::rnn_backward(w, step.cache, p);
  return worst_error(p, back.grads, {&hp, &xt}, {&back.dh_prev, &back.dx}, loss);
}

inline double dense_case_error(std::size_t out, std::size_t in, Activation act, std::uint64_t seed) {
  Rng rng(seed);
  rnnquant::DenseParams p = rnnquant::DenseParams::glorot(out, in, act, rng);
  randomise_biases(p, rng);
  Matrix x = random_matrix(in, 1, rng);
  // Keep relu pre-activations away from the kink.
  const auto pre = rnnquant::dense_forward(x, p).cache.preact;
  for (std::size_t i = 0; i < out; ++i) {
    if (std::abs(pre[i]) < 1e-3) p.bias[i] += 0.01;
  }
  const Matrix w = projection(out, rng);
  auto loss = [&] { return dot(w, rnnquant::dense_forward(x, p).y); };
  const auto step = rnnquant::dense_forward(x, p);
  const auto back = rnnquant::dense_backward(w, step.cache, p);
  return worst_error(p, back.grads, {&x}, {&back.dx}, loss);
}

// Independent check of the whole stack: analytic BPTT vs test-side central differences.
inline double full_model_error(const rnnquant::ModelSpec& spec, std::uint64_t seed) {
  using namespace rnnquant;
  Rng rng(seed);
  Model model = build_model(spec, rng);
  // Non-zero biases exercise the bias paths.
  visit_tensors(model.params, [&](std::size_t, const std::string& name, Matrix& m) {
    if (name.ends_with("bias")) m = oracle::random_matrix(m.rows(), 1, rng, 0.3);
  });
  const Matrix window = oracle::random_matrix(spec.window, spec.features, rng);
  const double target = rng.uniform(-1, 1);
  auto loss = [&] {
    const double e = predict(model, window) - target;
    return e * e;
  };
  const auto fwd = forward_sequence(model, window, Mode::infer);
  ParamSet grads = model.zero_grads();
  backward_sequence(model, fwd, 2.0 * (fwd.prediction - target), grads);
  auto analytic = tensor_list(std::as_const(grads));
  auto params = tensor_list(model.params);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    worst = std::max(worst, oracle::max_rel_error(*analytic[i], oracle::central_diff(*params[i], loss)));
  }
  return worst;
}

}  // namespace oracle
