// SPDX-License-Identifier: Apache-2.0
//
// Single-step recurrent cells (vanilla RNN, LSTM, GRU), dense layers and
// inverted dropout, each with an exact analytic backward pass.
//
// Vectors are n x 1 matrices. Every *_backward_acc function adds parameter
// gradients into a caller-owned accumulator so that backpropagation through
// time can sum over steps without reallocating; the plain *_backward
// variants return freshly zeroed gradients for a single step.
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "rnnquant/numerics.hpp"

namespace rnnquant {

enum class Activation { linear, relu };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "linear"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu or linear)");
}

enum class Mode { train, infer };

namespace detail {

inline void require_column(const Matrix& v, std::size_t n, const char* what) {
  if (v.cols() != 1 || v.rows() != n) {
    throw DimensionError(std::string(what) + ": expected " + Matrix::shape_string(n, 1) +
                         ", got " + v.shape());
  }
}

inline Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

}  // namespace detail

// ---------------------------------------------------------------------------
// GRU

/// One GRU gate: weight over the concatenation [h_prev, x] and a bias.
struct GruGate {
  Matrix weight;  // h x (h + x)
  Matrix bias;    // h x 1
};

/// Reset gate, update gate and candidate transform of a GRU cell.
struct GruParams {
  GruGate reset;
  GruGate update;
  GruGate candidate;

  std::size_t hidden() const noexcept { return reset.weight.rows(); }
  std::size_t input_size() const noexcept { return reset.weight.cols() - reset.weight.rows(); }

  static GruParams zeros(std::size_t h, std::size_t x) {
    auto gate = [&] { return GruGate{Matrix(h, h + x), Matrix(h, 1)}; };
    return {gate(), gate(), gate()};
  }

  static GruParams glorot(std::size_t h, std::size_t x, Rng& rng) {
    auto gate = [&] { return GruGate{glorot_init(h, h + x, rng), Matrix(h, 1)}; };
    GruParams p;
    p.reset = gate();
    p.update = gate();
    p.candidate = gate();
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("reset.weight", self.reset.weight);
    f("reset.bias", self.reset.bias);
    f("update.weight", self.update.weight);
    f("update.bias", self.update.bias);
    f("candidate.weight", self.candidate.weight);
    f("candidate.bias", self.candidate.bias);
  }

  void validate() const {
    const std::size_t h = hidden();
    for (const GruGate* g : {&reset, &update, &candidate}) {
      if (!g->weight.same_shape(reset.weight) || g->bias.rows() != h || g->bias.cols() != 1) {
        throw DimensionError("GRU gate shapes are inconsistent");
      }
    }
    if (reset.weight.cols() < h) throw DimensionError("GRU weight narrower than hidden size");
  }
};

struct GruCache {
  Matrix x;            // x_t
  Matrix h_prev;       // h_{t-1}
  Matrix reset;        // r_t
  Matrix update;       // z_t
  Matrix candidate;    // tanh output
  Matrix reset_state;  // r_t o h_{t-1}
};

struct GruStep {
  Matrix h;
  GruCache cache;
};

struct GruBackward {
  GruParams grads;
  Matrix dh_prev;
  Matrix dx;
};

inline GruStep gru_forward(const Matrix& x, const Matrix& h_prev, const GruParams& p) {
  const std::size_t h = p.hidden();
  const std::size_t n = p.input_size();
  detail::require_column(h_prev, h, "gru_forward h_prev");
  detail::require_column(x, n, "gru_forward x");

  std::vector<double> r(p.reset.bias.values());
  std::vector<double> z(p.update.bias.values());
  kernel::gemv_acc(p.reset.weight, 0, h_prev.data(), r);
  kernel::gemv_acc(p.reset.weight, h, x.data(), r);
  kernel::gemv_acc(p.update.weight, 0, h_prev.data(), z);
  kernel::gemv_acc(p.update.weight, h, x.data(), z);
  for (std::size_t i = 0; i < h; ++i) {
    r[i] = scalar::sigmoid(r[i]);
    z[i] = scalar::sigmoid(z[i]);
  }

  std::vector<double> rh(h);
  for (std::size_t i = 0; i < h; ++i) rh[i] = r[i] * h_prev[i];

  std::vector<double> c(p.candidate.bias.values());
  kernel::gemv_acc(p.candidate.weight, 0, rh, c);
  kernel::gemv_acc(p.candidate.weight, h, x.data(), c);
  for (double& v : c) v = scalar::tanh(v);

  std::vector<double> out(h);
  for (std::size_t i = 0; i < h; ++i) out[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];

  return {Matrix::column(std::move(out)),
          GruCache{x, h_prev, Matrix::column(std::move(r)), Matrix::column(std::move(z)),
                   Matrix::column(std::move(c)), Matrix::column(std::move(rh))}};
}

/// Adds dL/dtheta into `grads`; returns (dL/dh_prev, dL/dx).
inline std::pair<Matrix, Matrix> gru_backward_acc(const Matrix& dh, const GruCache& cache,
                                                  const GruParams& p, GruParams& grads) {
  const std::size_t h = p.hidden();
  const std::size_t n = p.input_size();
  detail::require_column(dh, h, "gru_backward dh");
  detail::require_column(cache.h_prev, h, "gru_backward cache");
  detail::require_column(cache.x, n, "gru_backward cache");
  if (!grads.reset.weight.same_shape(p.reset.weight)) {
    throw DimensionError("gru_backward: gradient accumulator shape mismatch");
  }

  const auto& r = cache.reset;
  const auto& z = cache.update;
  const auto& c = cache.candidate;
  const auto& hp = cache.h_prev;

  std::vector<double> dh_prev(h), dx(n);
  std::vector<double> da_c(h), da_z(h), da_r(h);
  for (std::size_t i = 0; i < h; ++i) {
    dh_prev[i] = dh[i] * (1.0 - z[i]);
    da_c[i] = dh[i] * z[i] * (1.0 - c[i] * c[i]);
    da_z[i] = dh[i] * (c[i] - hp[i]) * z[i] * (1.0 - z[i]);
  }

  // Candidate: input was [r o h_prev, x].
  kernel::outer_acc(grads.candidate.weight, 0, da_c, cache.reset_state.data());
  kernel::outer_acc(grads.candidate.weight, h, da_c, cache.x.data());
  kernel::axpy(1.0, da_c, grads.candidate.bias.data());
  std::vector<double> d_rh(h);
  kernel::gemv_t_acc(p.candidate.weight, 0, da_c, d_rh);
  kernel::gemv_t_acc(p.candidate.weight, h, da_c, dx);
  for (std::size_t i = 0; i < h; ++i) {
    da_r[i] = d_rh[i] * hp[i] * r[i] * (1.0 - r[i]);
    dh_prev[i] += d_rh[i] * r[i];
  }

  // Gates: input was [h_prev, x].
  for (auto [gate, grad, da] : {std::tuple{&p.update, &grads.update, &da_z},
                                std::tuple{&p.reset, &grads.reset, &da_r}}) {
    kernel::outer_acc(grad->weight, 0, *da, hp.data());
    kernel::outer_acc(grad->weight, h, *da, cache.x.data());
    kernel::axpy(1.0, *da, grad->bias.data());
    kernel::gemv_t_acc(gate->weight, 0, *da, dh_prev);
    kernel::gemv_t_acc(gate->weight, h, *da, dx);
  }
  return {Matrix::column(std::move(dh_prev)), Matrix::column(std::move(dx))};
}

inline GruBackward gru_backward(const Matrix& dh, const GruCache& cache, const GruParams& p) {
  GruBackward out{GruParams::zeros(p.hidden(), p.input_size()), {}, {}};
  std::tie(out.dh_prev, out.dx) = gru_backward_acc(dh, cache, p, out.grads);
  return out;
}

// ---------------------------------------------------------------------------
// LSTM

/// One LSTM gate: recurrent weight on h_prev, input weight on x, bias.
struct LstmGate {
  Matrix recurrent;  // h x h
  Matrix input;      // h x x
  Matrix bias;       // h x 1
};

/// Forget, input and output gates plus the tanh cell candidate.
struct LstmParams {
  LstmGate forget;
  LstmGate input;
  LstmGate cell;
  LstmGate output;

  std::size_t hidden() const noexcept { return forget.recurrent.rows(); }
  std::size_t input_size() const noexcept { return forget.input.cols(); }

  static LstmParams zeros(std::size_t h, std::size_t x) {
    auto gate = [&] { return LstmGate{Matrix(h, h), Matrix(h, x), Matrix(h, 1)}; };
    return {gate(), gate(), gate(), gate()};
  }

  static LstmParams glorot(std::size_t h, std::size_t x, Rng& rng) {
    auto gate = [&] {
      LstmGate g;
      g.recurrent = glorot_init(h, h, rng);
      g.input = glorot_init(h, x, rng);
      g.bias = Matrix(h, 1);
      return g;
    };
    LstmParams p;
    p.forget = gate();
    p.input = gate();
    p.cell = gate();
    p.output = gate();
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto gate = [&](const char* name, auto& g) {
      const std::string n(name);
      f(n + ".recurrent", g.recurrent);
      f(n + ".input", g.input);
      f(n + ".bias", g.bias);
    };
    gate("forget", self.forget);
    gate("input", self.input);
    gate("cell", self.cell);
    gate("output", self.output);
  }

  void validate() const {
    for (const LstmGate* g : {&forget, &input, &cell, &output}) {
      if (!g->recurrent.same_shape(forget.recurrent) || !g->input.same_shape(forget.input) ||
          !g->bias.same_shape(forget.bias) || g->recurrent.rows() != g->recurrent.cols() ||
          g->bias.rows() != hidden() || g->input.rows() != hidden()) {
        throw DimensionError("LSTM gate shapes are inconsistent");
      }
    }
  }
};

struct LstmCache {
  Matrix x;
  Matrix h_prev;
  Matrix c_prev;
  Matrix forget;     // f_t
  Matrix input;      // i_t
  Matrix candidate;  // g_t
  Matrix output;     // o_t
  Matrix c;          // c_t
  Matrix tanh_c;     // tanh(c_t)
};

struct LstmStep {
  Matrix h;
  Matrix c;
  LstmCache cache;
};

struct LstmBackward {
  LstmParams grads;
  Matrix dh_prev;
  Matrix dc_prev;
  Matrix dx;
};

inline LstmStep lstm_forward(const Matrix& x, const Matrix& h_prev, const Matrix& c_prev,
                             const LstmParams& p) {
  const std::size_t h = p.hidden();
  detail::require_column(h_prev, h, "lstm_forward h_prev");
  detail::require_column(c_prev, h, "lstm_forward c_prev");
  detail::require_column(x, p.input_size(), "lstm_forward x");

  auto preact = [&](const LstmGate& g) {
    std::vector<double> a(g.bias.values());
    kernel::gemv_acc(g.recurrent, 0, h_prev.data(), a);
    kernel::gemv_acc(g.input, 0, x.data(), a);
    return a;
  };
  std::vector<double> f = preact(p.forget);
  std::vector<double> i = preact(p.input);
  std::vector<double> g = preact(p.cell);
  std::vector<double> o = preact(p.output);
  std::vector<double> c(h), tc(h), out(h);
  for (std::size_t k = 0; k < h; ++k) {
    f[k] = scalar::sigmoid(f[k]);
    i[k] = scalar::sigmoid(i[k]);
    g[k] = scalar::tanh(g[k]);
    o[k] = scalar::sigmoid(o[k]);
    c[k] = f[k] * c_prev[k] + i[k] * g[k];
    tc[k] = scalar::tanh(c[k]);
    out[k] = o[k] * tc[k];
  }
  Matrix c_mat = Matrix::column(std::move(c));
  return {Matrix::column(std::move(out)), c_mat,
          LstmCache{x, h_prev, c_prev, Matrix::column(std::move(f)), Matrix::column(std::move(i)),
                    Matrix::column(std::move(g)), Matrix::column(std::move(o)), c_mat,
                    Matrix::column(std::move(tc))}};
}

struct LstmInputGrads {
  Matrix dh_prev;
  Matrix dc_prev;
  Matrix dx;
};

/// Adds dL/dtheta into `grads`. `dc` is the gradient arriving from c_t's
/// use at the next step; the path through h_t = o o tanh(c_t) is added here.
inline LstmInputGrads lstm_backward_acc(const Matrix& dh, const Matrix& dc, const LstmCache& cache,
                                        const LstmParams& p, LstmParams& grads) {
  const std::size_t h = p.hidden();
  const std::size_t n = p.input_size();
  detail::require_column(dh, h, "lstm_backward dh");
  detail::require_column(dc, h, "lstm_backward dc");
  detail::require_column(cache.c_prev, h, "lstm_backward cache");
  detail::require_column(cache.x, n, "lstm_backward cache");
  if (!grads.forget.input.same_shape(p.forget.input)) {
    throw DimensionError("lstm_backward: gradient accumulator shape mismatch");
  }

  std::vector<double> da_f(h), da_i(h), da_g(h), da_o(h), dc_prev(h);
  for (std::size_t k = 0; k < h; ++k) {
    const double f = cache.forget[k], i = cache.input[k], g = cache.candidate[k];
    const double o = cache.output[k], tc = cache.tanh_c[k];
    const double dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
    da_o[k] = dh[k] * tc * o * (1.0 - o);
    da_f[k] = dct * cache.c_prev[k] * f * (1.0 - f);
    da_i[k] = dct * g * i * (1.0 - i);
    da_g[k] = dct * i * (1.0 - g * g);
    dc_prev[k] = dct * f;
  }

  std::vector<double> dh_prev(h), dx(n);
  auto gate = [&](const LstmGate& w, LstmGate& gw, const std::vector<double>& da) {
    kernel::outer_acc(gw.recurrent, 0, da, cache.h_prev.data());
    kernel::outer_acc(gw.input, 0, da, cache.x.data());
    kernel::axpy(1.0, da, gw.bias.data());
    kernel::gemv_t_acc(w.recurrent, 0, da, dh_prev);
    kernel::gemv_t_acc(w.input, 0, da, dx);
  };
  gate(p.forget, grads.forget, da_f);
  gate(p.input, grads.input, da_i);
  gate(p.cell, grads.cell, da_g);
  gate(p.output, grads.output, da_o);

  return {Matrix::column(std::move(dh_prev)), Matrix::column(std::move(dc_prev)),
          Matrix::column(std::move(dx))};
}

inline LstmBackward lstm_backward(const Matrix& dh, const Matrix& dc, const LstmCache& cache,
                                  const LstmParams& p) {
  LstmBackward out{LstmParams::zeros(p.hidden(), p.input_size()), {}, {}, {}};
  auto g = lstm_backward_acc(dh, dc, cache, p, out.grads);
  out.dh_prev = std::move(g.dh_prev);
  out.dc_prev = std::move(g.dc_prev);
  out.dx = std::move(g.dx);
  return out;
}

// ---------------------------------------------------------------------------
// Vanilla RNN: h_t = tanh(W h_prev + U x + b)

struct RnnParams {
  Matrix recurrent;  // h x h
  Matrix input;      // h x x
  Matrix bias;       // h x 1

  std::size_t hidden() const noexcept { return recurrent.rows(); }
  std::size_t input_size() const noexcept { return input.cols(); }

  static RnnParams zeros(std::size_t h, std::size_t x) {
    return {Matrix(h, h), Matrix(h, x), Matrix(h, 1)};
  }

  static RnnParams glorot(std::size_t h, std::size_t x, Rng& rng) {
    RnnParams p;
    p.recurrent = glorot_init(h, h, rng);
    p.input = glorot_init(h, x, rng);
    p.bias = Matrix(h, 1);
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("recurrent", self.recurrent);
    f("input", self.input);
    f("bias", self.bias);
  }

  void validate() const {
    if (recurrent.rows() != recurrent.cols() || input.rows() != hidden() ||
        bias.rows() != hidden() || bias.cols() != 1) {
      throw DimensionError("RNN parameter shapes are inconsistent");
    }
  }
};

struct RnnCache {
  Matrix x;
  Matrix h_prev;
  Matrix h;
};

struct RnnStep {
  Matrix h;
  RnnCache cache;
};

struct RnnBackward {
  RnnParams grads;
  Matrix dh_prev;
  Matrix dx;
};

inline RnnStep rnn_forward(const Matrix& x, const Matrix& h_prev, const RnnParams& p) {
  detail::require_column(h_prev, p.hidden(), "rnn_forward h_prev");
  detail::require_column(x, p.input_size(), "rnn_forward x");
  std::vector<double> a(p.bias.values());
  kernel::gemv_acc(p.recurrent, 0, h_prev.data(), a);
  kernel::gemv_acc(p.input, 0, x.data(), a);
  for (double& v : a) v = scalar::tanh(v);
  Matrix h = Matrix::column(std::move(a));
  return {h, RnnCache{x, h_prev, h}};
}

inline std::pair<Matrix, Matrix> rnn_backward_acc(const Matrix& dh, const RnnCache& cache,
                                                  const RnnParams& p, RnnParams& grads) {
  const std::size_t h = p.hidden();
  detail::require_column(dh, h, "rnn_backward dh");
  detail::require_column(cache.h, h, "rnn_backward cache");
  detail::require_column(cache.x, p.input_size(), "rnn_backward cache");
  if (!grads.input.same_shape(p.input)) {
    throw DimensionError("rnn_backward: gradient accumulator shape mismatch");
  }
  std::vector<double> da(h);
  for (std::size_t i = 0; i < h; ++i) da[i] = dh[i] * (1.0 - cache.h[i] * cache.h[i]);
  kernel::outer_acc(grads.recurrent, 0, da, cache.h_prev.data());
  kernel::outer_acc(grads.input, 0, da, cache.x.data());
  kernel::axpy(1.0, da, grads.bias.data());
  std::vector<double> dh_prev(h), dx(p.input_size());
  kernel::gemv_t_acc(p.recurrent, 0, da, dh_prev);
  kernel::gemv_t_acc(p.input, 0, da, dx);
  return {Matrix::column(std::move(dh_prev)), Matrix::column(std::move(dx))};
}

inline RnnBackward rnn_backward(const Matrix& dh, const RnnCache& cache, const RnnParams& p) {
  RnnBackward out{RnnParams::zeros(p.hidden(), p.input_size()), {}, {}};
  std::tie(out.dh_prev, out.dx) = rnn_backward_acc(dh, cache, p, out.grads);
  return out;
}

// ---------------------------------------------------------------------------
// Dense: y = act(W x + b), relu'(0) = 0

struct DenseParams {
  Matrix weight;  // out x in
  Matrix bias;    // out x 1
  Activation activation = Activation::linear;

  std::size_t outputs() const noexcept { return weight.rows(); }
  std::size_t inputs() const noexcept { return weight.cols(); }

  static DenseParams zeros(std::size_t out, std::size_t in, Activation act) {
    return {Matrix(out, in), Matrix(out, 1), act};
  }

  static DenseParams glorot(std::size_t out, std::size_t in, Activation act, Rng& rng) {
    return {glorot_init(out, in, rng), Matrix(out, 1), act};
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("weight", self.weight);
    f("bias", self.bias);
  }

  void validate() const {
    if (bias.rows() != outputs() || bias.cols() != 1) {
      throw DimensionError("dense parameter shapes are inconsistent");
    }
  }
};

struct DenseCache {
  Matrix x;
  Matrix preact;
};

struct DenseStep {
  Matrix y;
  DenseCache cache;
};

struct DenseBackward {
  DenseParams grads;
  Matrix dx;
};

inline DenseStep dense_forward(const Matrix& x, const DenseParams& p) {
  detail::require_column(x, p.inputs(), "dense_forward x");
  std::vector<double> z(p.bias.values());
  kernel::gemv_acc(p.weight, 0, x.data(), z);
  Matrix pre = Matrix::column(z);
  if (p.activation == Activation::relu) {
    for (double& v : z) v = scalar::relu(v);
  }
  return {Matrix::column(std::move(z)), DenseCache{x, std::move(pre)}};
}

inline Matrix dense_backward_acc(const Matrix& dy, const DenseCache& cache, const DenseParams& p,
                                 DenseParams& grads) {
  detail::require_column(dy, p.outputs(), "dense_backward dy");
  detail::require_column(cache.x, p.inputs(), "dense_backward cache");
  if (!grads.weight.same_shape(p.weight)) {
    throw DimensionError("dense_backward: gradient accumulator shape mismatch");
  }
  std::vector<double> dz(dy.values());
  if (p.activation == Activation::relu) {
    for (std::size_t i = 0; i < dz.size(); ++i) {
      if (!(cache.preact[i] > 0.0)) dz[i] = 0.0;
    }
  }
  kernel::outer_acc(grads.weight, 0, dz, cache.x.data());
  kernel::axpy(1.0, dz, grads.bias.data());
  std::vector<double> dx(p.inputs());
  kernel::gemv_t_acc(p.weight, 0, dz, dx);
  return Matrix::column(std::move(dx));
}

inline DenseBackward dense_backward(const Matrix& dy, const DenseCache& cache,
                                    const DenseParams& p) {
  DenseBackward out{DenseParams::zeros(p.outputs(), p.inputs(), p.activation), {}};
  out.dx = dense_backward_acc(dy, cache, p, out.grads);
  return out;
}

// ---------------------------------------------------------------------------
// Inverted dropout

inline void validate_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

struct DropoutStep {
  Matrix y;
  Matrix mask;  // 0 for dropped units, 1/(1-rate) for survivors; all ones in infer mode
};

/// Train mode zeroes each unit with probability `rate` and rescales survivors
/// by 1/(1-rate); infer mode is the identity. The generator is only consumed
/// in train mode with rate > 0.
inline DropoutStep dropout(const Matrix& x, double rate, Mode mode, Rng& rng) {
  validate_dropout_rate(rate);
  if (mode == Mode::infer || rate == 0.0) {
    return {x, Matrix::filled(x.rows(), x.cols(), 1.0)};
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    y[i] = x[i] * mask[i];
  }
  return {std::move(y), std::move(mask)};
}

inline Matrix dropout_backward(const Matrix& dy, const Matrix& mask) { return hadamard(dy, mask); }

}  // namespace rnnquant
