// SPDX-License-Identifier: Apache-2.0
//
// Text checkpoint format:
//
//   rnnquant-checkpoint 1 seed=<u64> features=<F> window=<L> layers=<spec>
//   layer <index> <layer spec>
//   tensor <name> <rows> <cols>
//   <row-major values, one matrix row per line, 17 significant digits>
//   ...
//   end
//
// Values are written with std::to_chars and read with std::from_chars, so a
// save/load cycle reproduces every parameter bit for bit.
#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "rnnquant/model.hpp"

namespace rnnquant {

inline constexpr std::string_view kCheckpointMagic = "rnnquant-checkpoint";

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
};

inline void save_checkpoint(std::ostream& os, const Model& model, std::uint64_t seed) {
  os << kCheckpointMagic << " 1 seed=" << seed << " features=" << model.spec.features
     << " window=" << model.spec.window << " layers=" << model.spec.layers_str() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    os << "layer " << i << ' ' << model.spec.layers[i].str() << '\n';
    const ParamSet one{model.params[i]};
    visit_tensors(one, [&](std::size_t, const std::string& name, const Matrix& m) {
      os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
      for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
          auto res = std::to_chars(buf, buf + sizeof buf, m(r, c), std::chars_format::general, 17);
          if (c) os << ' ';
          os.write(buf, res.ptr - buf);
        }
        os << '\n';
      }
    });
  }
  os << "end\n";
}

inline Checkpoint load_checkpoint(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> std::string& {
    if (!std::getline(is, line)) throw ParseError(lineno + 1, "unexpected end of checkpoint");
    ++lineno;
    return line;
  };

  next();
  auto field = [&](const std::string& key) -> std::string {
    const auto pos = line.find(" " + key + "=");
    if (pos == std::string::npos) throw ParseError(lineno, "missing header field '" + key + "'");
    const auto start = pos + key.size() + 2;
    if (key == "layers") return line.substr(start);
    return line.substr(start, line.find(' ', start) - start);
  };
  if (line.rfind(std::string(kCheckpointMagic) + " 1 ", 0) != 0) {
    throw ParseError(lineno, "not a version-1 rnnquant checkpoint");
  }
  Checkpoint ck;
  ModelSpec spec;
  try {
    ck.seed = std::stoull(field("seed"));
    spec.features = std::stoul(field("features"));
    spec.window = std::stoul(field("window"));
  } catch (const std::logic_error&) {
    throw ParseError(lineno, "invalid numeric header field");
  }
  spec.layers = ModelSpec::parse_layers(field("layers"));
  spec.validate();
  ck.model = Model{spec, make_params(spec, nullptr)};

  // Tensors appear in visit order; check names and shapes as we fill them.
  std::size_t expected_layer = 0;
  visit_tensors(ck.model.params, [&](std::size_t layer, const std::string& name, Matrix& m) {
    while (true) {
      next();
      if (line.rfind("layer ", 0) == 0) {
        std::istringstream ls(line.substr(6));
        std::size_t idx = 0;
        ls >> idx;
        if (idx != expected_layer) throw ParseError(lineno, "layer index out of order");
        ++expected_layer;
        continue;
      }
      break;
    }
    if (expected_layer != layer + 1) throw ParseError(lineno, "tensor outside its layer block");
    std::istringstream ts(line);
    std::string tag, tname;
    std::size_t rows = 0, cols = 0;
    ts >> tag >> tname >> rows >> cols;
    if (tag != "tensor" || tname != name || rows != m.rows() || cols != m.cols()) {
      throw ParseError(lineno, "expected tensor " + name + " " + m.shape());
    }
    for (std::size_t r = 0; r < rows; ++r) {
      next();
      const char* p = line.data();
      const char* end = line.data() + line.size();
      for (std::size_t c = 0; c < cols; ++c) {
        while (p < end && *p == ' ') ++p;
        double v = 0.0;
        const auto res = std::from_chars(p, end, v);
        if (res.ec != std::errc{} || !std::isfinite(v)) throw ParseError(lineno, "invalid value");
        m(r, c) = v;
        p = res.ptr;
      }
      while (p < end && *p == ' ') ++p;
      if (p != end) throw ParseError(lineno, "trailing data in tensor row");
    }
  });
  while (true) {
    next();
    if (line.rfind("layer ", 0) == 0) {
      ++expected_layer;
      continue;
    }
    if (line != "end") throw ParseError(lineno, "expected 'end'");
    break;
  }
  if (expected_layer != spec.layers.size()) throw ParseError(lineno, "layer count mismatch");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Model& model, std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint '" + path + "'");
  save_checkpoint(os, model, seed);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace rnnquant
