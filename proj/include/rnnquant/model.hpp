// SPDX-License-Identifier: Apache-2.0
//
// Sequential layer stacks over fixed-length windows: assembly from a layer
// list, forward/backward through time, MSE loss, Adam, the mini-batch
// training loop and a full-model finite-difference gradient checker.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rnnquant/cells.hpp"
#include "rnnquant/dataset.hpp"
#include "rnnquant/metrics.hpp"

namespace rnnquant {

// ---------------------------------------------------------------------------
// Layer specification

enum class LayerKind { rnn, lstm, gru, dropout, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t units = 0;                      // hidden size or dense width
  Activation activation = Activation::linear;  // post-activation for recurrent layers
  double rate = 0.0;                           // dropout only

  static LayerSpec rnn(std::size_t h, Activation post = Activation::linear) {
    return {LayerKind::rnn, h, post, 0.0};
  }
  static LayerSpec lstm(std::size_t h, Activation post = Activation::linear) {
    return {LayerKind::lstm, h, post, 0.0};
  }
  static LayerSpec gru(std::size_t h, Activation post = Activation::linear) {
    return {LayerKind::gru, h, post, 0.0};
  }
  static LayerSpec dropout(double rate) { return {LayerKind::dropout, 0, Activation::linear, rate}; }
  static LayerSpec dense(std::size_t n, Activation act) { return {LayerKind::dense, n, act, 0.0}; }

  bool recurrent() const noexcept {
    return kind == LayerKind::rnn || kind == LayerKind::lstm || kind == LayerKind::gru;
  }

  bool operator==(const LayerSpec&) const = default;

  std::string str() const {
    switch (kind) {
      case LayerKind::dropout: {
        char buf[32];
        auto res = std::to_chars(buf, buf + sizeof buf, rate);
        return "dropout(" + std::string(buf, res.ptr) + ")";
      }
      case LayerKind::dense:
        return "dense(" + std::to_string(units) + "," + std::string(to_string(activation)) + ")";
      default: {
        const char* name = kind == LayerKind::rnn ? "rnn" : kind == LayerKind::lstm ? "lstm" : "gru";
        std::string s = std::string(name) + "(" + std::to_string(units);
        if (activation != Activation::linear) s += "," + std::string(to_string(activation));
        return s + ")";
      }
    }
  }

  /// Parses "lstm(256,relu)", "gru(128)", "dropout(0.2)", "dense(32,relu)".
  static LayerSpec parse(std::string_view text) {
    auto trim = [](std::string_view s) {
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
      while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
      return s;
    };
    const std::string_view s = trim(text);
    const auto open = s.find('(');
    if (open == std::string_view::npos || s.back() != ')') {
      throw SpecError("malformed layer '" + std::string(s) + "'");
    }
    const std::string_view name = trim(s.substr(0, open));
    std::string_view args = s.substr(open + 1, s.size() - open - 2);
    std::vector<std::string_view> parts;
    while (true) {
      const auto comma = args.find(',');
      parts.push_back(trim(args.substr(0, comma)));
      if (comma == std::string_view::npos) break;
      args.remove_prefix(comma + 1);
    }
    auto count = [&](std::string_view p) {
      std::size_t n = 0;
      const auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), n);
      if (ec != std::errc{} || ptr != p.data() + p.size() || n == 0) {
        throw SpecError("layer '" + std::string(s) + "': invalid unit count");
      }
      return n;
    };
    auto act = [&](std::size_t i) {
      if (parts.size() <= i) return Activation::linear;
      try {
        return parse_activation(parts[i]);
      } catch (const ConfigError&) {
        throw SpecError("layer '" + std::string(s) + "': unknown activation");
      }
    };
    if (name == "dropout") {
      if (parts.size() != 1) throw SpecError("dropout takes one argument");
      double r = 0.0;
      const auto [ptr, ec] = std::from_chars(parts[0].data(), parts[0].data() + parts[0].size(), r);
      if (ec != std::errc{} || ptr != parts[0].data() + parts[0].size() || !(r >= 0.0 && r < 1.0)) {
        throw SpecError("dropout rate must lie in [0, 1)");
      }
      return dropout(r);
    }
    if (parts.empty() || parts.size() > 2) {
      throw SpecError("layer '" + std::string(s) + "' takes (units[,activation])");
    }
    if (name == "dense") return dense(count(parts[0]), act(1));
    if (name == "lstm") return lstm(count(parts[0]), act(1));
    if (name == "gru") return gru(count(parts[0]), act(1));
    if (name == "rnn") return rnn(count(parts[0]), act(1));
    throw SpecError("unknown layer type '" + std::string(name) + "'");
  }
};

/// Ordered layer list plus the input geometry (F features per step, L steps).
///
/// Recurrent layers scan the whole window; the first dense layer reads the
/// final hidden state of the last recurrent layer. Dropout between recurrent
/// layers masks every time step independently.
struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::size_t features = 0;
  std::size_t window = 0;

  bool operator==(const ModelSpec&) const = default;

  std::string layers_str() const {
    std::string s;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i) s += " > ";
      s += layers[i].str();
    }
    return s;
  }

  static std::vector<LayerSpec> parse_layers(std::string_view text) {
    std::vector<LayerSpec> out;
    while (true) {
      const auto sep = text.find('>');
      out.push_back(LayerSpec::parse(text.substr(0, sep)));
      if (sep == std::string_view::npos) break;
      text.remove_prefix(sep + 1);
    }
    return out;
  }

  std::size_t last_recurrent() const {
    std::size_t last = layers.size();
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].recurrent()) last = i;
    return last;
  }

  void validate() const {
    if (features == 0) throw SpecError("model needs at least one input feature");
    if (window == 0) throw SpecError("model window length must be at least 1");
    if (layers.empty()) throw SpecError("model has no layers");
    bool seen_recurrent = false;
    bool seen_dense = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::string where = "layer " + std::to_string(i) + " " + l.str();
      if (l.kind == LayerKind::dropout) {
        if (!(l.rate >= 0.0 && l.rate < 1.0)) throw SpecError(where + ": rate must lie in [0, 1)");
        continue;
      }
      if (l.units == 0) throw SpecError(where + ": zero units");
      if (l.recurrent()) {
        if (seen_dense) throw SpecError(where + ": recurrent layer after a dense layer");
        seen_recurrent = true;
      } else {
        if (!seen_recurrent) throw SpecError(where + ": dense layer must follow a recurrent layer");
        seen_dense = true;
      }
    }
    const LayerSpec& last = layers.back();
    if (last.kind != LayerKind::dense || last.units != 1 || last.activation != Activation::linear) {
      throw SpecError("final layer must be dense(1,linear), got " + last.str());
    }
  }
};

/// Widths used to scale the named presets down for desk-scale runs.
struct PresetWidths {
  std::size_t lstm = 256;
  std::size_t gru = 128;
  std::size_t dense = 32;
  double dropout = 0.2;
};

/// "paper":    lstm(256,relu) > dropout(0.2) > dense(32,relu) > dense(1,linear)
/// "lstm-gru": lstm(256,relu) > dropout(0.2) > gru(128) > dense(32,relu) > dense(1,linear)
inline ModelSpec preset(std::string_view name, std::size_t features, std::size_t window,
                        const PresetWidths& w = {}) {
  ModelSpec spec{{}, features, window};
  if (name == "paper") {
    spec.layers = {LayerSpec::lstm(w.lstm, Activation::relu), LayerSpec::dropout(w.dropout),
                   LayerSpec::dense(w.dense, Activation::relu),
                   LayerSpec::dense(1, Activation::linear)};
  } else if (name == "lstm-gru") {
    spec.layers = {LayerSpec::lstm(w.lstm, Activation::relu), LayerSpec::dropout(w.dropout),
                   LayerSpec::gru(w.gru), LayerSpec::dense(w.dense, Activation::relu),
                   LayerSpec::dense(1, Activation::linear)};
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "' (paper, lstm-gru)");
  }
  spec.validate();
  return spec;
}

inline bool is_preset(std::string_view name) { return name == "paper" || name == "lstm-gru"; }

/// A preset name or an explicit layer string such as "gru(8) > dense(1,linear)".
inline ModelSpec resolve_model(std::string_view model, std::size_t features, std::size_t window,
                               const PresetWidths& widths = {}) {
  if (is_preset(model)) return preset(model, features, window, widths);
  ModelSpec spec{ModelSpec::parse_layers(model), features, window};
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Model

using LayerParams = std::variant<std::monostate, RnnParams, LstmParams, GruParams, DenseParams>;
using ParamSet = std::vector<LayerParams>;

template <typename F>
void visit_tensors(ParamSet& params, F&& f) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::visit(
        [&](auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (!std::is_same_v<P, std::monostate>) {
            P::visit(p, [&](const std::string& name, Matrix& m) { f(i, name, m); });
          }
        },
        params[i]);
  }
}

template <typename F>
void visit_tensors(const ParamSet& params, F&& f) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::visit(
        [&](const auto& p) {
          using P = std::decay_t<decltype(p)>;
          if constexpr (!std::is_same_v<P, std::monostate>) {
            P::visit(p, [&](const std::string& name, const Matrix& m) { f(i, name, m); });
          }
        },
        params[i]);
  }
}

inline std::vector<Matrix*> tensor_list(ParamSet& params) {
  std::vector<Matrix*> out;
  visit_tensors(params, [&](std::size_t, const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

inline std::vector<const Matrix*> tensor_list(const ParamSet& params) {
  std::vector<const Matrix*> out;
  visit_tensors(params, [&](std::size_t, const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

/// Parameters for `spec`, either zero-filled (rng == nullptr) or Glorot-initialised.
inline ParamSet make_params(const ModelSpec& spec, Rng* rng) {
  ParamSet params;
  std::size_t width = spec.features;
  for (const LayerSpec& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::rnn:
        params.emplace_back(rng ? RnnParams::glorot(l.units, width, *rng) : RnnParams::zeros(l.units, width));
        width = l.units;
        break;
      case LayerKind::lstm:
        params.emplace_back(rng ? LstmParams::glorot(l.units, width, *rng) : LstmParams::zeros(l.units, width));
        width = l.units;
        break;
      case LayerKind::gru:
        params.emplace_back(rng ? GruParams::glorot(l.units, width, *rng) : GruParams::zeros(l.units, width));
        width = l.units;
        break;
      case LayerKind::dense:
        params.emplace_back(rng ? DenseParams::glorot(l.units, width, l.activation, *rng)
                                : DenseParams::zeros(l.units, width, l.activation));
        width = l.units;
        break;
      case LayerKind::dropout:
        params.emplace_back(std::monostate{});
        break;
    }
  }
  return params;
}

struct Model {
  ModelSpec spec;
  ParamSet params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_tensors(params, [&](std::size_t, const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  ParamSet zero_grads() const { return make_params(spec, nullptr); }
};

/// Validates the spec and Glorot-initialises every weight from `rng`.
/// Biases and recurrent initial states start at zero.
inline Model build_model(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  return Model{spec, make_params(spec, &rng)};
}

// ---------------------------------------------------------------------------
// Forward / backward through time

struct LayerTrace {
  std::vector<RnnCache> rnn;
  std::vector<LstmCache> lstm;
  std::vector<GruCache> gru;
  std::vector<Matrix> raw;    // recurrent output before the post-activation
  std::vector<Matrix> masks;  // dropout masks, one per step (or one in the head)
  DenseCache dense;
};

struct ForwardResult {
  double prediction = 0.0;
  std::vector<LayerTrace> layers;
};

namespace detail {

inline Matrix post_activate(const Matrix& h, Activation a) { return a == Activation::relu ? relu(h) : h; }

inline void post_activation_backward(Matrix& d, const Matrix& raw, Activation a) {
  if (a != Activation::relu) return;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(raw[i] > 0.0)) d[i] = 0.0;
}

}  // namespace detail

/// Runs `window` (L x F) through the stack. Train mode draws dropout masks
/// from `rng`, which must then be non-null.
inline ForwardResult forward_sequence(const Model& model, const Matrix& window, Mode mode,
                                      Rng* rng = nullptr) {
  const ModelSpec& spec = model.spec;
  if (window.rows() != spec.window || window.cols() != spec.features) {
    throw DimensionError("forward_sequence: window " + window.shape() + " does not match model " +
                         Matrix::shape_string(spec.window, spec.features));
  }
  const std::size_t steps = spec.window;
  const std::size_t last_rec = spec.last_recurrent();

  ForwardResult out;
  out.layers.resize(spec.layers.size());

  std::vector<Matrix> seq;
  seq.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    seq.push_back(Matrix(spec.features, 1, std::vector<double>(window.row(t).begin(), window.row(t).end())));
  }
  Matrix head;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& ls = spec.layers[i];
    LayerTrace& trace = out.layers[i];
    const bool in_sequence = i <= last_rec;

    if (ls.kind == LayerKind::dropout) {
      if (mode == Mode::train && ls.rate > 0.0 && rng == nullptr) {
        throw ConfigError("forward_sequence: train-mode dropout needs a generator");
      }
      Rng dummy(0);
      Rng& r = rng ? *rng : dummy;
      if (in_sequence) {
        for (Matrix& x : seq) {
          auto d = dropout(x, ls.rate, mode, r);
          x = std::move(d.y);
          trace.masks.push_back(std::move(d.mask));
        }
      } else {
        auto d = dropout(head, ls.rate, mode, r);
        head = std::move(d.y);
        trace.masks.push_back(std::move(d.mask));
      }
    } else if (ls.kind == LayerKind::dense) {
      auto step = dense_forward(head, std::get<DenseParams>(model.params[i]));
      head = std::move(step.y);
      trace.dense = std::move(step.cache);
    } else {
      const std::size_t h = ls.units;
      Matrix state(h, 1);
      Matrix cell(h, 1);
      trace.raw.reserve(steps);
      for (std::size_t t = 0; t < steps; ++t) {
        switch (ls.kind) {
          case LayerKind::rnn: {
            auto s = rnn_forward(seq[t], state, std::get<RnnParams>(model.params[i]));
            state = std::move(s.h);
            trace.rnn.push_back(std::move(s.cache));
            break;
          }
          case LayerKind::lstm: {
            auto s = lstm_forward(seq[t], state, cell, std::get<LstmParams>(model.params[i]));
            state = std::move(s.h);
            cell = std::move(s.c);
            trace.lstm.push_back(std::move(s.cache));
            break;
          }
          default: {
            auto s = gru_forward(seq[t], state, std::get<GruParams>(model.params[i]));
            state = std::move(s.h);
            trace.gru.push_back(std::move(s.cache));
            break;
          }
        }
        trace.raw.push_back(state);
        seq[t] = detail::post_activate(state, ls.activation);
      }
    }
    if (i == last_rec) head = seq.back();
  }
  out.prediction = head[0];
  return out;
}

/// Accumulates d(loss)/d(theta) into `grads` given d(loss)/d(prediction).
inline void backward_sequence(const Model& model, const ForwardResult& fwd, double dpred,
                              ParamSet& grads) {
  const ModelSpec& spec = model.spec;
  const std::size_t steps = spec.window;
  const std::size_t last_rec = spec.last_recurrent();

  Matrix dhead = Matrix::column({dpred});
  for (std::size_t i = spec.layers.size(); i-- > last_rec + 1;) {
    const LayerSpec& ls = spec.layers[i];
    if (ls.kind == LayerKind::dense) {
      dhead = dense_backward_acc(dhead, fwd.layers[i].dense, std::get<DenseParams>(model.params[i]),
                                 std::get<DenseParams>(grads[i]));
    } else {
      dhead = hadamard(dhead, fwd.layers[i].masks.front());
    }
  }

  std::vector<Matrix> dseq(steps);
  for (std::size_t t = 0; t + 1 < steps; ++t) dseq[t] = Matrix(dhead.rows(), 1);
  dseq[steps - 1] = std::move(dhead);

  for (std::size_t i = last_rec + 1; i-- > 0;) {
    const LayerSpec& ls = spec.layers[i];
    const LayerTrace& trace = fwd.layers[i];
    if (ls.kind == LayerKind::dropout) {
      for (std::size_t t = 0; t < steps; ++t) dseq[t] = hadamard(dseq[t], trace.masks[t]);
      continue;
    }
    const std::size_t h = ls.units;
    Matrix dh_next(h, 1);
    Matrix dc_next(h, 1);
    for (std::size_t t = steps; t-- > 0;) {
      Matrix dh = std::move(dseq[t]);
      detail::post_activation_backward(dh, trace.raw[t], ls.activation);
      dh += dh_next;
      switch (ls.kind) {
        case LayerKind::rnn: {
          auto [dprev, dx] = rnn_backward_acc(dh, trace.rnn[t], std::get<RnnParams>(model.params[i]),
                                              std::get<RnnParams>(grads[i]));
          dh_next = std::move(dprev);
          dseq[t] = std::move(dx);
          break;
        }
        case LayerKind::lstm: {
          auto g = lstm_backward_acc(dh, dc_next, trace.lstm[t], std::get<LstmParams>(model.params[i]),
                                     std::get<LstmParams>(grads[i]));
          dh_next = std::move(g.dh_prev);
          dc_next = std::move(g.dc_prev);
          dseq[t] = std::move(g.dx);
          break;
        }
        default: {
          auto [dprev, dx] = gru_backward_acc(dh, trace.gru[t], std::get<GruParams>(model.params[i]),
                                              std::get<GruParams>(grads[i]));
          dh_next = std::move(dprev);
          dseq[t] = std::move(dx);
          break;
        }
      }
    }
  }
}

inline double predict(const Model& model, const Matrix& window) {
  return forward_sequence(model, window, Mode::infer).prediction;
}

// ---------------------------------------------------------------------------
// Loss and optimiser

struct MseResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// loss = mean((pred - target)^2); grad_i = 2 (pred_i - target_i) / N.
inline MseResult mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw DimensionError("mse_loss: lengths " + std::to_string(pred.size()) + " and " +
                         std::to_string(target.size()) + " must be equal and nonzero");
  }
  const double n = static_cast<double>(pred.size());
  MseResult r;
  r.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    r.loss += e * e;
    r.grad[i] = 2.0 * e / n;
  }
  r.loss /= n;
  return r;
}

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::optional<double> clip_norm = 5.0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip_norm must be positive when set");
  }
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t t = 0;

  template <typename Tensors>
  static AdamState zeros_like(const Tensors& params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->rows(), p->cols());
      s.v.emplace_back(p->rows(), p->cols());
    }
    return s;
  }
};

/// One bias-corrected Adam update of every tensor in `params`.
inline void adam_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                      AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g = *grads[k];
    Matrix::require_same_shape(p, g, "adam_step");
    Matrix::require_same_shape(p, state.m[k], "adam_step");
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    auto theta = p.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      theta[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

inline double global_norm(std::span<const Matrix* const> grads) {
  double s = 0.0;
  for (const Matrix* g : grads) s += sum_squares(*g);
  return std::sqrt(s);
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
inline double clip_global_norm(std::span<Matrix* const> grads, double max_norm) {
  std::vector<const Matrix*> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Matrix* g : grads) *g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> dir_acc;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    const bool with_val = !epochs.empty() && epochs.front().val_loss.has_value();
    std::ostringstream os;
    os << (with_val ? "epoch,train_loss,val_loss,dir_acc\n" : "epoch,train_loss\n");
    for (const EpochRecord& e : epochs) os << csv_row(e);
    return os.str();
  }

  static std::string csv_row(const EpochRecord& e) {
    std::string row = std::to_string(e.epoch) + "," + format_real(e.train_loss);
    if (e.val_loss) row += "," + format_real(*e.val_loss) + "," + format_real(e.dir_acc.value_or(0.0));
    return row + "\n";
  }

  static std::string format_real(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
  }
};

struct TrainResult {
  Model model;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline void check_dataset(const Model& model, const SequenceDataset& data, const char* what) {
  for (const Matrix& x : data.inputs) {
    if (x.rows() != model.spec.window || x.cols() != model.spec.features) {
      throw DimensionError(std::string(what) + ": sample shape " + x.shape() +
                           " does not match model " +
                           Matrix::shape_string(model.spec.window, model.spec.features));
    }
  }
  if (data.targets.size() != data.inputs.size()) {
    throw DataError(std::string(what) + ": target count differs from sample count");
  }
}

/// Mini-batch BPTT over the full window with global-norm clipping and Adam.
/// The shuffle schedule and dropout masks derive from cfg.seed only, so
/// (seed, config, data) fixes the trained parameters bit for bit.
inline TrainResult train(Model model, const SequenceDataset& data, const TrainConfig& cfg,
                         const SequenceDataset* validation = nullptr,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  check_dataset(model, data, "train");
  if (validation) check_dataset(model, *validation, "validation");

  Rng rng(cfg.seed);
  std::vector<Matrix*> params = tensor_list(model.params);
  AdamState adam = AdamState::zeros_like(params);
  ParamSet grads = model.zero_grads();
  std::vector<Matrix*> grad_tensors = tensor_list(grads);
  std::vector<const Matrix*> grad_view(grad_tensors.begin(), grad_tensors.end());

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainHistory history;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<ForwardResult> fwd;
      std::vector<double> pred, target;
      fwd.reserve(end - start);
      try {
        for (std::size_t k = start; k < end; ++k) {
          fwd.push_back(forward_sequence(model, data.inputs[order[k]], Mode::train, &rng));
          pred.push_back(fwd.back().prediction);
          target.push_back(data.targets[order[k]]);
        }
        const MseResult mse = mse_loss(pred, target);
        if (!std::isfinite(mse.loss)) {
          throw TrainingDivergedError(epoch, batch_index, "non-finite loss");
        }
        for (Matrix* g : grad_tensors) g->set_zero();
        for (std::size_t k = 0; k < fwd.size(); ++k) backward_sequence(model, fwd[k], mse.grad[k], grads);
        if (!std::isfinite(global_norm(grad_view))) {
          throw TrainingDivergedError(epoch, batch_index, "non-finite gradient");
        }
        if (cfg.clip_norm) clip_global_norm(grad_tensors, *cfg.clip_norm);
        adam_step(params, grad_view, adam, cfg);
        loss_sum += mse.loss * static_cast<double>(end - start);
      } catch (const TrainingDivergedError&) {
        throw;
      } catch (const DataError& e) {
        // Non-finite activations are rejected when their matrices are built.
        throw TrainingDivergedError(epoch, batch_index, e.what());
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(data.size());
    if (!std::isfinite(rec.train_loss)) throw TrainingDivergedError(epoch, batch_index, "non-finite epoch loss");
    if (validation && !validation->empty()) {
      std::vector<double> vp;
      vp.reserve(validation->size());
      for (const Matrix& x : validation->inputs) vp.push_back(predict(model, x));
      rec.val_loss = mse_loss(vp, validation->targets).loss;
      rec.dir_acc = metrics::directional_accuracy(vp, validation->targets);
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return {std::move(model), std::move(history)};
}

// ---------------------------------------------------------------------------
// Gradient check

struct LayerGradError {
  std::size_t layer = 0;
  std::string description;
  double max_rel_error = 0.0;
  std::string worst_tensor;
};

struct GradCheckReport {
  std::vector<LayerGradError> layers;
  double tolerance = 1e-4;

  double max_error() const {
    double m = 0.0;
    for (const auto& l : layers) m = std::max(m, l.max_rel_error);
    return m;
  }
  bool passed() const { return max_error() < tolerance; }
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  bool corrupt_backward = false;  // fault injection: flips the analytic gradient sign
};

/// |a - n| / max(|a| + |n|, 1e-6)
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
}

/// Compares full-model BPTT gradients of the squared error (pred - target)^2
/// with central differences on every parameter. Dropout runs in infer mode.
inline GradCheckReport grad_check(Model model, const Matrix& window, double target, double eps,
                                  const GradCheckOptions& opts = {}) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  auto loss = [&] {
    const double e = predict(model, window) - target;
    return e * e;
  };
  const ForwardResult fwd = forward_sequence(model, window, Mode::infer);
  ParamSet grads = model.zero_grads();
  backward_sequence(model, fwd, 2.0 * (fwd.prediction - target), grads);

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    if (model.spec.layers[i].kind == LayerKind::dropout) continue;
    report.layers.push_back({i, model.spec.layers[i].str(), 0.0, ""});
  }
  std::vector<const Matrix*> analytic = tensor_list(std::as_const(grads));
  std::size_t k = 0;
  visit_tensors(model.params, [&](std::size_t layer, const std::string& name, Matrix& m) {
    const Matrix& g = *analytic[k++];
    auto entry = std::find_if(report.layers.begin(), report.layers.end(),
                              [&](const LayerGradError& e) { return e.layer == layer; });
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double saved = m[i];
      m[i] = saved + eps;
      const double up = loss();
      m[i] = saved - eps;
      const double down = loss();
      m[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = opts.corrupt_backward ? -g[i] : g[i];
      const double err = grad_rel_error(a, numeric);
      if (err > entry->max_rel_error) {
        entry->max_rel_error = err;
        entry->worst_tensor = name;
      }
    }
  });
  return report;
}

}  // namespace rnnquant
