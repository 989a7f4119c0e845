#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/dataset.hpp"
#include "cdj/network.hpp"
#include "cdj/trainer.hpp"

// Run configuration: a flat key=value text format with [sections]. Unknown
// keys and sections are errors. `--set section.key=value` overrides apply
// after the file parse; a key without a section qualifier is accepted when
// it is unambiguous.
//
//   [data]
//   source = blobs              # blobs | idx | csv
//   classes = 4                 # blobs only
//   samples_per_class = 60
//   image_side = 12
//   separation = 6.0
//   noise = 0.25
//   seed = 20                   # generation and split seed
//   test_fraction = 0.25
//   images = path  labels = path   # idx source
//   csv = path                     # csv source
//
//   [network]
//   layers = conv 8 3x3 stride 1 pad 1 pool 2 2 | conv 12 3x3 | fc 4
//   routing = auto              # auto | none | comma list of layer indices
//   bias = true
//
//   [training]
//   epochs = 30
//   batch_size = 0              # 0 = 10 x routing classes
//   lambda1 = 0.1
//   lambda2 = 0.1
//   momentum = 0.9
//   schedule = 1:0.05 30:0.005  # epoch:rate breakpoints, geometric between
//   seed = 1
//   routing_labels = class      # class | auxiliary
//   normalize_c = true
//
//   [output]
//   dir = runs/out
//   probe_every = 0             # export probes every k epochs; 0 = final only
namespace cdj {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  enum class Source { blobs, idx, csv };
  Source source = Source::blobs;
  std::size_t classes = 4;
  std::size_t samples_per_class = 60;
  std::size_t image_side = 12;
  double separation = 6.0;
  double noise = 0.25;
  std::uint64_t seed = 20;
  double test_fraction = 0.25;
  std::string images, labels, csv;
};

struct NetworkConfig {
  enum class Routing { automatic, none, explicit_list };
  std::vector<LayerSpec> layers;
  Routing routing = Routing::automatic;
  std::vector<std::size_t> routing_list;
  bool bias = true;
};

struct OutputConfig {
  std::string dir = "runs/out";
  std::size_t probe_every = 0;
};

struct RunConfig {
  DataConfig data;
  NetworkConfig network;
  TrainingConfig training;
  OutputConfig output;
  std::string canonical;    // resolved key=value lines, sorted
  std::uint64_t hash = 0;   // FNV-1a of `canonical`

  std::string hash_hex() const {
    std::ostringstream os;
    os << std::hex << hash;
    return os.str();
  }
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// section -> allowed keys
inline const std::map<std::string, std::vector<std::string>>& config_schema() {
  static const std::map<std::string, std::vector<std::string>> schema = {
      {"data",
       {"source", "classes", "samples_per_class", "image_side", "separation",
        "noise", "seed", "test_fraction", "images", "labels", "csv"}},
      {"network", {"layers", "routing", "bias"}},
      {"training",
       {"epochs", "batch_size", "lambda1", "lambda2", "momentum", "schedule",
        "seed", "routing_labels", "normalize_c"}},
      {"output", {"dir", "probe_every"}},
  };
  return schema;
}

inline std::string resolve_key(const std::string& key) {
  if (key.find('.') != std::string::npos) return key;
  std::string found;
  for (const auto& [section, keys] : config_schema()) {
    for (const std::string& k : keys) {
      if (k == key) {
        if (!found.empty()) {
          throw ConfigError("config: ambiguous key '" + key + "'; qualify as " +
                            found + " or " + section + "." + key);
        }
        found = section + "." + key;
      }
    }
  }
  if (found.empty()) throw ConfigError("config: unknown key '" + key + "'");
  return found;
}

inline void check_known(const std::string& qualified) {
  const std::size_t dot = qualified.find('.');
  const std::string section = qualified.substr(0, dot);
  const std::string key = qualified.substr(dot + 1);
  const auto it = config_schema().find(section);
  if (it == config_schema().end()) {
    throw ConfigError("config: unknown section '" + section + "'");
  }
  for (const std::string& k : it->second) {
    if (k == key) return;
  }
  throw ConfigError("config: unknown key '" + qualified + "'");
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": expected an integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: " + key + ": expected true/false, got '" + v + "'");
}

inline std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::stringstream entries(text);
  std::string entry;
  while (std::getline(entries, entry, '|')) {
    entry = trim(entry);
    if (entry.empty()) continue;
    std::istringstream is(entry);
    std::string kind;
    is >> kind;
    LayerSpec spec;
    if (kind == "conv") {
      std::size_t maps = 0;
      std::string kernel;
      if (!(is >> maps >> kernel)) {
        throw ConfigError("config: network.layers: conv entry needs "
                          "'conv <maps> <KHxKW>', got '" + entry + "'");
      }
      const std::size_t x = kernel.find('x');
      if (x == std::string::npos) {
        throw ConfigError("config: network.layers: bad kernel '" + kernel + "'");
      }
      spec = LayerSpec::conv(maps, std::stoi(kernel.substr(0, x)),
                             std::stoi(kernel.substr(x + 1)));
      std::string word;
      while (is >> word) {
        if (word == "stride") {
          is >> spec.stride;
        } else if (word == "pad") {
          is >> spec.padding;
        } else if (word == "pool") {
          PoolSpec pool;
          if (!(is >> pool.window >> pool.stride)) {
            throw ConfigError("config: network.layers: pool needs "
                              "'pool <window> <stride>'");
          }
          spec.pool_after = pool;
        } else {
          throw ConfigError("config: network.layers: unknown token '" + word +
                            "' in '" + entry + "'");
        }
      }
    } else if (kind == "fc") {
      std::size_t maps = 0;
      if (!(is >> maps)) {
        throw ConfigError("config: network.layers: fc entry needs 'fc <maps>'");
      }
      std::string extra;
      if (is >> extra) {
        throw ConfigError("config: network.layers: unexpected token '" + extra +
                          "' after fc entry");
      }
      spec = LayerSpec::fully_connected(maps);
    } else {
      throw ConfigError("config: network.layers: unknown layer kind '" + kind +
                        "'");
    }
    layers.push_back(spec);
  }
  if (layers.empty()) {
    throw ConfigError("config: network.layers: no layers given");
  }
  return layers;
}

inline std::vector<LrBreakpoint> parse_schedule(const std::string& text) {
  std::vector<LrBreakpoint> schedule;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    const std::size_t colon = tok.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("config: training.schedule: expected epoch:rate, got '" +
                        tok + "'");
    }
    schedule.push_back(
        {static_cast<std::size_t>(parse_u64("training.schedule", tok.substr(0, colon))),
         static_cast<real>(parse_double("training.schedule", tok.substr(colon + 1)))});
  }
  if (schedule.empty()) {
    throw ConfigError("config: training.schedule: empty schedule");
  }
  return schedule;
}

}  // namespace detail

/// Parse a config file plus `--set` overrides into a validated RunConfig.
inline RunConfig parse_run_config(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");

  std::map<std::string, std::string> entries;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": malformed section header '" + line + "'");
      }
      section = line.substr(1, line.size() - 2);
      if (detail::config_schema().find(section) == detail::config_schema().end()) {
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": unknown section '" + section + "'");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    }
    if (section.empty()) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": key outside any [section]");
    }
    const std::string key = section + "." + detail::trim(line.substr(0, eq));
    detail::check_known(key);
    if (entries.count(key)) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": duplicate key '" + key + "'");
    }
    entries[key] = detail::trim(line.substr(eq + 1));
  }

  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: --set expects key=value, got '" + ov + "'");
    }
    const std::string key = detail::resolve_key(detail::trim(ov.substr(0, eq)));
    detail::check_known(key);
    entries[key] = detail::trim(ov.substr(eq + 1));
  }

  RunConfig cfg;
  auto take = [&](const char* key) -> const std::string* {
    const auto it = entries.find(key);
    return it == entries.end() ? nullptr : &it->second;
  };

  if (const std::string* v = take("data.source")) {
    if (*v == "blobs") {
      cfg.data.source = DataConfig::Source::blobs;
    } else if (*v == "idx") {
      cfg.data.source = DataConfig::Source::idx;
    } else if (*v == "csv") {
      cfg.data.source = DataConfig::Source::csv;
    } else {
      throw ConfigError("config: data.source: expected blobs|idx|csv, got '" +
                        *v + "'");
    }
  }
  if (const std::string* v = take("data.classes")) {
    cfg.data.classes = detail::parse_u64("data.classes", *v);
  }
  if (const std::string* v = take("data.samples_per_class")) {
    cfg.data.samples_per_class = detail::parse_u64("data.samples_per_class", *v);
  }
  if (const std::string* v = take("data.image_side")) {
    cfg.data.image_side = detail::parse_u64("data.image_side", *v);
  }
  if (const std::string* v = take("data.separation")) {
    cfg.data.separation = detail::parse_double("data.separation", *v);
  }
  if (const std::string* v = take("data.noise")) {
    cfg.data.noise = detail::parse_double("data.noise", *v);
  }
  if (const std::string* v = take("data.seed")) {
    cfg.data.seed = detail::parse_u64("data.seed", *v);
  }
  if (const std::string* v = take("data.test_fraction")) {
    cfg.data.test_fraction = detail::parse_double("data.test_fraction", *v);
  }
  if (const std::string* v = take("data.images")) cfg.data.images = *v;
  if (const std::string* v = take("data.labels")) cfg.data.labels = *v;
  if (const std::string* v = take("data.csv")) cfg.data.csv = *v;

  if (const std::string* v = take("network.layers")) {
    cfg.network.layers = detail::parse_layers(*v);
  } else {
    throw ConfigError("config: network.layers is required");
  }
  if (const std::string* v = take("network.routing")) {
    if (*v == "auto") {
      cfg.network.routing = NetworkConfig::Routing::automatic;
    } else if (*v == "none") {
      cfg.network.routing = NetworkConfig::Routing::none;
    } else {
      cfg.network.routing = NetworkConfig::Routing::explicit_list;
      std::stringstream ss(*v);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        cfg.network.routing_list.push_back(
            detail::parse_u64("network.routing", detail::trim(tok)));
      }
      if (cfg.network.routing_list.empty()) {
        throw ConfigError("config: network.routing: empty layer list");
      }
    }
  }
  if (const std::string* v = take("network.bias")) {
    cfg.network.bias = detail::parse_bool("network.bias", *v);
  }

  if (const std::string* v = take("training.epochs")) {
    cfg.training.epochs = detail::parse_u64("training.epochs", *v);
  }
  if (const std::string* v = take("training.batch_size")) {
    cfg.training.batch_size = detail::parse_u64("training.batch_size", *v);
  }
  if (const std::string* v = take("training.lambda1")) {
    cfg.training.lambda1 =
        static_cast<real>(detail::parse_double("training.lambda1", *v));
  }
  if (const std::string* v = take("training.lambda2")) {
    cfg.training.lambda2 =
        static_cast<real>(detail::parse_double("training.lambda2", *v));
  }
  if (const std::string* v = take("training.momentum")) {
    cfg.training.momentum =
        static_cast<real>(detail::parse_double("training.momentum", *v));
  }
  if (const std::string* v = take("training.schedule")) {
    cfg.training.schedule = detail::parse_schedule(*v);
  }
  if (const std::string* v = take("training.seed")) {
    cfg.training.seed = detail::parse_u64("training.seed", *v);
  }
  if (const std::string* v = take("training.routing_labels")) {
    if (*v == "class") {
      cfg.training.routing_label_source = RoutingLabelSource::class_labels;
    } else if (*v == "auxiliary") {
      cfg.training.routing_label_source = RoutingLabelSource::auxiliary;
    } else {
      throw ConfigError(
          "config: training.routing_labels: expected class|auxiliary, got '" +
          *v + "'");
    }
  }
  if (const std::string* v = take("training.normalize_c")) {
    cfg.training.normalize_c_by_batch =
        detail::parse_bool("training.normalize_c", *v);
  }

  if (const std::string* v = take("output.dir")) {
    cfg.output.dir = *v;
  } else if (const char* env = std::getenv("CDJ_OUT_DIR")) {
    cfg.output.dir = env;
  }
  if (const std::string* v = take("output.probe_every")) {
    cfg.output.probe_every = detail::parse_u64("output.probe_every", *v);
  }

  // Early validation, before any compute or output.
  cfg.training.validate();
  if (cfg.data.source == DataConfig::Source::blobs) {
    if (cfg.data.separation <= 0) {
      throw ConfigError("config: data.separation must be > 0");
    }
    if (cfg.data.classes < 2) {
      throw ConfigError("config: data.classes must be >= 2");
    }
  } else if (cfg.data.source == DataConfig::Source::idx) {
    if (cfg.data.images.empty() || cfg.data.labels.empty()) {
      throw ConfigError("config: idx source needs data.images and data.labels");
    }
  } else if (cfg.data.csv.empty()) {
    throw ConfigError("config: csv source needs data.csv");
  }
  if (!(cfg.data.test_fraction > 0 && cfg.data.test_fraction < 1)) {
    throw ConfigError("config: data.test_fraction must be in (0, 1)");
  }

  std::ostringstream canon;
  for (const auto& [k, v] : entries) canon << k << "=" << v << "\n";
  cfg.canonical = canon.str();
  cfg.hash = detail::fnv1a64(cfg.canonical);
  return cfg;
}

/// Generate or load the dataset and produce the train/test splits.
inline std::pair<Dataset, Dataset> build_datasets(const DataConfig& data) {
  Dataset full;
  switch (data.source) {
    case DataConfig::Source::blobs:
      full = generate_blobs(data.classes, data.samples_per_class,
                            data.image_side, data.separation, data.seed,
                            data.noise);
      break;
    case DataConfig::Source::idx:
      full = load_idx(data.images, data.labels);
      break;
    case DataConfig::Source::csv:
      full = load_csv(data.csv, data.image_side);
      break;
  }
  return split(full, data.test_fraction, data.seed);
}

/// Resolve routing flags against the actual routing class count and attach
/// the input shape. `auto` enables every layer after the first whose map
/// count is strictly larger than the routing class count; a layer with
/// exactly one map per class (the logits layer in particular) gets no
/// routing loss, since there the purity reward degenerates into unbounded
/// activation growth.
inline NetworkTopology build_topology(const NetworkConfig& network,
                                      const Dataset& train_set,
                                      std::size_t routing_classes) {
  NetworkTopology topo;
  const std::vector<std::size_t>& in_shape =
      train_set.samples.at(0).input.shape();
  topo.in_channels = in_shape[0];
  topo.in_height = in_shape[1];
  topo.in_width = in_shape[2];
  topo.num_classes = train_set.num_classes;
  topo.use_bias = network.bias;
  topo.layers = network.layers;
  switch (network.routing) {
    case NetworkConfig::Routing::automatic:
      for (std::size_t l = 1; l < topo.layers.size(); ++l) {
        topo.layers[l].routing_enabled =
            topo.layers[l].num_maps >= routing_classes;
      }
      break;
    case NetworkConfig::Routing::none:
      break;
    case NetworkConfig::Routing::explicit_list:
      for (std::size_t l : network.routing_list) {
        if (l >= topo.layers.size()) {
          throw ConfigError("config: network.routing: layer index " +
                            std::to_string(l) + " out of range");
        }
        topo.layers[l].routing_enabled = true;
      }
      break;
  }
  topo.validate(routing_classes);
  return topo;
}

}  // namespace cdj
