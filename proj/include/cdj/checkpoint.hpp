#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/network.hpp"
#include "cdj/tensor.hpp"

// Checkpoint file format: a text manifest followed by a raw little-endian
// payload of the parameter values.
//
//   CDJCKPT            magic string
//   version=1
//   scalar=float64     (float32 in single-precision builds)
//   endian=little
//   input=CxHxW
//   classes=C
//   use_bias=0|1
//   layers=L
//   layerK=conv maps=M kernel=KHxKW stride=S pad=P pool=W:S routing=0|1
//   layerK=fc maps=M routing=0|1
//   meta.<key>=<value> (free-form provenance, any number of lines)
//   payload=<bytes>
//   ---
//   <raw values: per layer, filters then bias, row-major>
//
// The round trip is value-exact: the payload stores the in-memory bytes.
namespace cdj {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline const char* scalar_name() {
#ifdef CDJ_REAL_FLOAT
  return "float32";
#else
  return "float64";
#endif
}

inline void require_little_endian(const char* what) {
  if constexpr (std::endian::native != std::endian::little) {
    throw CheckpointError(std::string(what) +
                          ": big-endian platforms are not supported");
  }
}

inline std::string layer_line(const LayerSpec& spec) {
  std::ostringstream os;
  if (spec.kind == LayerSpec::Kind::conv) {
    os << "conv maps=" << spec.num_maps << " kernel=" << spec.kernel_h << "x"
       << spec.kernel_w << " stride=" << spec.stride << " pad=" << spec.padding;
    if (spec.pool_after) {
      os << " pool=" << spec.pool_after->window << ":"
         << spec.pool_after->stride;
    }
  } else {
    os << "fc maps=" << spec.num_maps;
  }
  os << " routing=" << (spec.routing_enabled ? 1 : 0);
  return os.str();
}

inline LayerSpec parse_layer_line(const std::string& line) {
  std::istringstream is(line);
  std::string kind;
  is >> kind;
  LayerSpec spec;
  if (kind == "conv") {
    spec.kind = LayerSpec::Kind::conv;
  } else if (kind == "fc") {
    spec.kind = LayerSpec::Kind::fully_connected;
  } else {
    throw CheckpointError("checkpoint: unknown layer kind '" + kind + "'");
  }
  std::string tok;
  while (is >> tok) {
    const std::size_t eq = tok.find('=');
    if (eq == std::string::npos) {
      throw CheckpointError("checkpoint: malformed layer token '" + tok + "'");
    }
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    if (key == "maps") {
      spec.num_maps = std::stoul(val);
    } else if (key == "kernel") {
      const std::size_t x = val.find('x');
      if (x == std::string::npos) {
        throw CheckpointError("checkpoint: bad kernel '" + val + "'");
      }
      spec.kernel_h = std::stoi(val.substr(0, x));
      spec.kernel_w = std::stoi(val.substr(x + 1));
    } else if (key == "stride") {
      spec.stride = std::stoi(val);
    } else if (key == "pad") {
      spec.padding = std::stoi(val);
    } else if (key == "pool") {
      const std::size_t colon = val.find(':');
      if (colon == std::string::npos) {
        throw CheckpointError("checkpoint: bad pool '" + val + "'");
      }
      spec.pool_after = PoolSpec{std::stoi(val.substr(0, colon)),
                                 std::stoi(val.substr(colon + 1))};
    } else if (key == "routing") {
      spec.routing_enabled = val == "1";
    } else {
      throw CheckpointError("checkpoint: unknown layer key '" + key + "'");
    }
  }
  return spec;
}

}  // namespace detail

struct Checkpoint {
  NetworkTopology topology;
  ParameterSet params;
  std::map<std::string, std::string> meta;
};

inline void save_checkpoint(const ParameterSet& params,
                            const NetworkTopology& topology,
                            const std::string& path,
                            const std::map<std::string, std::string>& meta = {}) {
  detail::require_little_endian("save_checkpoint");
  check_parameters_fit(topology, params);

  std::size_t payload_values = 0;
  for (const ParameterSet::Layer& l : params.layers) {
    payload_values += l.filters.size() + l.bias.size();
  }

  const std::filesystem::path final_path(path);
  const std::filesystem::path tmp_path(path + ".tmp");
  {
    std::ofstream out(tmp_path, std::ios::binary);
    if (!out) throw CheckpointError(path + ": cannot open for writing");
    out << "CDJCKPT\n";
    out << "version=1\n";
    out << "scalar=" << detail::scalar_name() << "\n";
    out << "endian=little\n";
    out << "input=" << topology.in_channels << "x" << topology.in_height << "x"
        << topology.in_width << "\n";
    out << "classes=" << topology.num_classes << "\n";
    out << "use_bias=" << (topology.use_bias ? 1 : 0) << "\n";
    out << "layers=" << topology.layers.size() << "\n";
    for (std::size_t l = 0; l < topology.layers.size(); ++l) {
      out << "layer" << l << "=" << detail::layer_line(topology.layers[l])
          << "\n";
    }
    for (const auto& [k, v] : meta) out << "meta." << k << "=" << v << "\n";
    out << "payload=" << payload_values * sizeof(real) << "\n";
    out << "---\n";
    for (const ParameterSet::Layer& l : params.layers) {
      out.write(reinterpret_cast<const char*>(l.filters.data()),
                static_cast<std::streamsize>(l.filters.size() * sizeof(real)));
      out.write(reinterpret_cast<const char*>(l.bias.data()),
                static_cast<std::streamsize>(l.bias.size() * sizeof(real)));
    }
    if (!out) throw CheckpointError(path + ": write failed");
  }
  std::filesystem::rename(tmp_path, final_path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::require_little_endian("load_checkpoint");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open");

  std::string line;
  if (!std::getline(in, line) || line != "CDJCKPT") {
    throw CheckpointError(path + ": not a CDJ checkpoint (bad magic)");
  }

  Checkpoint ck;
  std::map<std::string, std::string> kv;
  std::vector<std::string> layer_lines;
  while (std::getline(in, line)) {
    if (line == "---") break;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw CheckpointError(path + ": malformed manifest line '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key.rfind("layer", 0) == 0 && key != "layers") {
      const std::size_t idx = std::stoul(key.substr(5));
      if (layer_lines.size() <= idx) layer_lines.resize(idx + 1);
      layer_lines[idx] = val;
    } else if (key.rfind("meta.", 0) == 0) {
      ck.meta[key.substr(5)] = val;
    } else {
      kv[key] = val;
    }
  }
  if (line != "---") {
    throw CheckpointError(path + ": truncated file (missing payload marker)");
  }

  auto require = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw CheckpointError(path + ": manifest missing '" + key + "'");
    }
    return it->second;
  };

  if (require("version") != "1") {
    throw CheckpointError(path + ": unsupported checkpoint version " +
                          kv["version"]);
  }
  if (require("scalar") != detail::scalar_name()) {
    throw CheckpointError(path + ": checkpoint scalar type " + kv["scalar"] +
                          " does not match this build (" +
                          detail::scalar_name() + ")");
  }
  if (require("endian") != "little") {
    throw CheckpointError(path + ": unsupported byte order " + kv["endian"]);
  }

  {
    const std::string& inp = require("input");
    std::size_t a = inp.find('x'), b = inp.rfind('x');
    if (a == std::string::npos || b == a) {
      throw CheckpointError(path + ": bad input shape '" + inp + "'");
    }
    ck.topology.in_channels = std::stoul(inp.substr(0, a));
    ck.topology.in_height = std::stoul(inp.substr(a + 1, b - a - 1));
    ck.topology.in_width = std::stoul(inp.substr(b + 1));
  }
  ck.topology.num_classes = std::stoul(require("classes"));
  ck.topology.use_bias = require("use_bias") == "1";
  const std::size_t n_layers = std::stoul(require("layers"));
  if (layer_lines.size() != n_layers) {
    throw CheckpointError(path + ": manifest declares " +
                          std::to_string(n_layers) + " layers but carries " +
                          std::to_string(layer_lines.size()));
  }
  for (const std::string& ll : layer_lines) {
    ck.topology.layers.push_back(detail::parse_layer_line(ll));
  }
  ck.topology.validate();

  const std::size_t payload_bytes = std::stoul(require("payload"));
  const std::vector<LayerShapes> chain = ck.topology.shape_chain();
  std::size_t expected_values = 0;
  for (std::size_t l = 0; l < ck.topology.layers.size(); ++l) {
    const LayerSpec& spec = ck.topology.layers[l];
    const LayerShapes& sh = chain[l];
    expected_values += spec.kind == LayerSpec::Kind::conv
                           ? spec.num_maps * sh.in_channels *
                                 static_cast<std::size_t>(spec.kernel_h) *
                                 static_cast<std::size_t>(spec.kernel_w)
                           : sh.in_channels * sh.in_h * sh.in_w * spec.num_maps;
    if (ck.topology.use_bias) expected_values += spec.num_maps;
  }
  if (payload_bytes != expected_values * sizeof(real)) {
    throw CheckpointError(
        path + ": payload size " + std::to_string(payload_bytes) +
        " bytes does not match the declared topology (expected " +
        std::to_string(expected_values * sizeof(real)) + ")");
  }

  std::vector<real> values(expected_values);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(payload_bytes));
  if (static_cast<std::size_t>(in.gcount()) != payload_bytes) {
    throw CheckpointError(path + ": truncated payload: expected " +
                          std::to_string(payload_bytes) + " bytes, got " +
                          std::to_string(in.gcount()));
  }

  std::size_t off = 0;
  for (std::size_t l = 0; l < ck.topology.layers.size(); ++l) {
    const LayerSpec& spec = ck.topology.layers[l];
    const LayerShapes& sh = chain[l];
    ParameterSet::Layer layer;
    const std::vector<std::size_t> fshape =
        spec.kind == LayerSpec::Kind::conv
            ? std::vector<std::size_t>{spec.num_maps, sh.in_channels,
                                       static_cast<std::size_t>(spec.kernel_h),
                                       static_cast<std::size_t>(spec.kernel_w)}
            : std::vector<std::size_t>{sh.in_channels * sh.in_h * sh.in_w,
                                       spec.num_maps};
    std::size_t count = 1;
    for (std::size_t d : fshape) count *= d;
    layer.filters = Tensor(fshape, std::vector<real>(values.begin() + off,
                                                     values.begin() + off + count));
    off += count;
    if (ck.topology.use_bias) {
      layer.bias = Tensor({spec.num_maps},
                          std::vector<real>(values.begin() + off,
                                            values.begin() + off + spec.num_maps));
      off += spec.num_maps;
    }
    ck.params.layers.push_back(std::move(layer));
  }
  return ck;
}

/// Load and insist the stored topology matches `expected` exactly.
inline Checkpoint load_checkpoint_as(const std::string& path,
                                     const NetworkTopology& expected) {
  Checkpoint ck = load_checkpoint(path);
  auto same_layer = [](const LayerSpec& a, const LayerSpec& b) {
    return a.kind == b.kind && a.num_maps == b.num_maps &&
           a.kernel_h == b.kernel_h && a.kernel_w == b.kernel_w &&
           a.stride == b.stride && a.padding == b.padding &&
           a.pool_after.has_value() == b.pool_after.has_value() &&
           (!a.pool_after || (a.pool_after->window == b.pool_after->window &&
                              a.pool_after->stride == b.pool_after->stride)) &&
           a.routing_enabled == b.routing_enabled;
  };
  bool ok = ck.topology.in_channels == expected.in_channels &&
            ck.topology.in_height == expected.in_height &&
            ck.topology.in_width == expected.in_width &&
            ck.topology.num_classes == expected.num_classes &&
            ck.topology.use_bias == expected.use_bias &&
            ck.topology.layers.size() == expected.layers.size();
  for (std::size_t l = 0; ok && l < expected.layers.size(); ++l) {
    ok = same_layer(ck.topology.layers[l], expected.layers[l]);
  }
  if (!ok) {
    throw CheckpointError(path + ": checkpoint topology (" +
                          std::to_string(ck.topology.layers.size()) +
                          " layers) does not match the expected topology (" +
                          std::to_string(expected.layers.size()) + " layers)");
  }
  return ck;
}

}  // namespace cdj
