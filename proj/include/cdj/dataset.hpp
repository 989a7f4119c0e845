#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cdj/rng.hpp"
#include "cdj/tensor.hpp"

namespace cdj {

/// One training point: an input tensor, its class label in [0, C), and an
/// optional auxiliary label in [0, C_aux) used by auxiliary-mode routing.
struct LabeledSample {
  Tensor input;
  int label = 0;
  std::optional<int> aux_label;
};

enum class Split { train, test };

struct Dataset {
  std::vector<LabeledSample> samples;
  std::size_t num_classes = 0;
  std::size_t num_aux_classes = 0;  // 0 when no auxiliary labels exist
  Split tag = Split::train;
  std::string provenance;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("dataset: no classes");
    std::vector<std::size_t> per_class(num_classes, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const LabeledSample& s = samples[i];
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes) {
        throw std::invalid_argument("dataset: sample " + std::to_string(i) +
                                    " label " + std::to_string(s.label) +
                                    " outside [0, " +
                                    std::to_string(num_classes) + ")");
      }
      per_class[static_cast<std::size_t>(s.label)]++;
      if (s.aux_label) {
        if (*s.aux_label < 0 ||
            static_cast<std::size_t>(*s.aux_label) >= num_aux_classes) {
          throw std::invalid_argument("dataset: sample " + std::to_string(i) +
                                      " auxiliary label out of range");
        }
      }
      if (!samples.empty() && !s.input.same_shape(samples[0].input)) {
        throw std::invalid_argument("dataset: sample " + std::to_string(i) +
                                    " shape " + s.input.shape_string() +
                                    " differs from " +
                                    samples[0].input.shape_string());
      }
    }
    if (tag == Split::train) {
      for (std::size_t c = 0; c < num_classes; ++c) {
        if (per_class[c] == 0) {
          throw std::invalid_argument("dataset: class " + std::to_string(c) +
                                      " has no samples in the train split");
        }
      }
    }
  }

  /// Stack the selected samples into an N x C x H x W batch tensor.
  Tensor stack(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) throw std::invalid_argument("dataset: empty batch");
    const std::vector<std::size_t>& s0 = samples[indices[0]].input.shape();
    Tensor batch({indices.size(), s0[0], s0[1], s0[2]});
    const std::size_t stride = samples[indices[0]].input.size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const Tensor& in = samples[indices[i]].input;
      std::copy(in.data(), in.data() + stride, batch.data() + i * stride);
    }
    return batch;
  }

  std::vector<int> labels(const std::vector<std::size_t>& indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      out[i] = samples[indices[i]].label;
    }
    return out;
  }

  std::vector<int> aux_labels(const std::vector<std::size_t>& indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::optional<int>& z = samples[indices[i]].aux_label;
      if (!z) {
        throw std::invalid_argument("dataset: sample " +
                                    std::to_string(indices[i]) +
                                    " has no auxiliary label");
      }
      out[i] = *z;
    }
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }
};

/// Synthetic image classification set: each class is a Gaussian bump at a
/// class-specific position (classes sit on a circle whose adjacent centers
/// are `separation` pixels apart) plus additive Gaussian pixel noise of the
/// given standard deviation. Auxiliary labels group the classes into two
/// superclasses by circle half. Fully deterministic given the seed.
inline Dataset generate_blobs(std::size_t num_classes,
                              std::size_t samples_per_class,
                              std::size_t image_side, double separation,
                              std::uint64_t seed, double pixel_noise = 1.0) {
  if (separation <= 0) {
    throw std::invalid_argument("generate_blobs: separation must be > 0");
  }
  if (num_classes < 1 || samples_per_class < 1 || image_side < 2) {
    throw std::invalid_argument("generate_blobs: degenerate arguments");
  }
  const double pi = 3.14159265358979323846;
  const double mid = (static_cast<double>(image_side) - 1.0) / 2.0;
  const double radius =
      num_classes > 1 ? separation / (2.0 * std::sin(pi / num_classes)) : 0.0;
  const double bump_amplitude = 4.0;
  const double bump_sigma = 1.5;

  Rng rng(seed);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.num_aux_classes = num_classes > 1 ? 2 : 1;
  {
    std::ostringstream os;
    os << "blobs(C=" << num_classes << ",n=" << samples_per_class
       << ",side=" << image_side << ",sep=" << separation << ",seed=" << seed
       << ")";
    ds.provenance = os.str();
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double angle = 2.0 * pi * static_cast<double>(c) /
                         static_cast<double>(num_classes);
    const double cx0 = mid + radius * std::cos(angle);
    const double cy0 = mid + radius * std::sin(angle);
    const int aux = static_cast<std::size_t>(2 * c) < num_classes ? 0 : 1;
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      const double cx = cx0;
      const double cy = cy0;
      Tensor img({1, image_side, image_side});
      for (std::size_t y = 0; y < image_side; ++y) {
        for (std::size_t x = 0; x < image_side; ++x) {
          const double dx = static_cast<double>(x) - cx;
          const double dy = static_cast<double>(y) - cy;
          const double bump = bump_amplitude *
                              std::exp(-(dx * dx + dy * dy) /
                                       (2.0 * bump_sigma * bump_sigma));
          img[y * image_side + x] =
              static_cast<real>(bump + pixel_noise * rng.normal());
        }
      }
      ds.samples.push_back(
          LabeledSample{std::move(img), static_cast<int>(c), aux});
    }
  }
  ds.validate();
  return ds;
}

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& path,
                                 std::size_t at) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) {
    throw std::runtime_error(path + ": unexpected end of file at byte " +
                             std::to_string(at));
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

/// IDX-format loader (the MNIST container): big-endian magic and extents,
/// u8 payload. Pixels are scaled to [0, 1]; labels are used as 0-based
/// class indices.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path,
                        std::size_t num_classes = 0) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error(images_path + ": cannot open");
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error(labels_path + ": cannot open");

  const std::uint32_t img_magic = detail::read_be_u32(imgs, images_path, 0);
  if (img_magic != 0x00000803u) {
    std::ostringstream os;
    os << images_path << ": bad magic 0x" << std::hex << img_magic
       << " at byte 0 (expected 0x803 image file)";
    throw std::runtime_error(os.str());
  }
  const std::uint32_t lab_magic = detail::read_be_u32(labs, labels_path, 0);
  if (lab_magic != 0x00000801u) {
    std::ostringstream os;
    os << labels_path << ": bad magic 0x" << std::hex << lab_magic
       << " at byte 0 (expected 0x801 label file)";
    throw std::runtime_error(os.str());
  }
  const std::uint32_t n_imgs = detail::read_be_u32(imgs, images_path, 4);
  const std::uint32_t rows = detail::read_be_u32(imgs, images_path, 8);
  const std::uint32_t cols = detail::read_be_u32(imgs, images_path, 12);
  const std::uint32_t n_labs = detail::read_be_u32(labs, labels_path, 4);
  if (n_imgs != n_labs) {
    throw std::runtime_error("idx: image count " + std::to_string(n_imgs) +
                             " != label count " + std::to_string(n_labs));
  }
  if (n_imgs == 0) {
    throw std::runtime_error(images_path + ": empty image file");
  }

  Dataset ds;
  ds.provenance = "idx(" + images_path + ")";
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n_imgs; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!imgs) {
      throw std::runtime_error(images_path +
                               ": unexpected end of file in image " +
                               std::to_string(i) + " (at byte " +
                               std::to_string(16 + std::size_t(i) * buf.size()) +
                               ")");
    }
    char lab;
    labs.read(&lab, 1);
    if (!labs) {
      throw std::runtime_error(labels_path +
                               ": unexpected end of file at label " +
                               std::to_string(i));
    }
    const int label = static_cast<unsigned char>(lab);
    max_label = std::max(max_label, label);
    Tensor img({1, rows, cols});
    for (std::size_t p = 0; p < buf.size(); ++p) {
      img[p] = static_cast<real>(buf[p]) / real(255);
    }
    ds.samples.push_back(LabeledSample{std::move(img), label, std::nullopt});
  }
  ds.num_classes = num_classes ? num_classes
                               : static_cast<std::size_t>(max_label) + 1;
  if (static_cast<std::size_t>(max_label) >= ds.num_classes) {
    throw std::runtime_error(labels_path + ": label " +
                             std::to_string(max_label) + " outside [0, " +
                             std::to_string(ds.num_classes) + ")");
  }
  return ds;
}

/// CSV rows: label, then side*side pixel cells in [0, 255] (scaled to
/// [0, 1] like the IDX loader). Errors carry the 1-based row number.
inline Dataset load_csv(const std::string& path, std::size_t image_side,
                        std::size_t num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  const std::size_t pixels = image_side * image_side;

  Dataset ds;
  ds.provenance = "csv(" + path + ")";
  std::string line;
  std::size_t row = 0;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<real> cells;
    cells.reserve(pixels + 1);
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        while (used < cell.size() &&
               std::isspace(static_cast<unsigned char>(cell[used]))) {
          ++used;
        }
        if (used != cell.size()) throw std::invalid_argument(cell);
        cells.push_back(static_cast<real>(v));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ": row " + std::to_string(row) +
                                 ", column " + std::to_string(cells.size() + 1) +
                                 ": not a number: '" + cell + "'");
      }
    }
    if (cells.size() != pixels + 1) {
      throw std::runtime_error(path + ": row " + std::to_string(row) +
                               ": expected " + std::to_string(pixels + 1) +
                               " cells (label + pixels), got " +
                               std::to_string(cells.size()));
    }
    const real lv = cells[0];
    const int label = static_cast<int>(lv);
    if (static_cast<real>(label) != lv || label < 0) {
      throw std::runtime_error(path + ": row " + std::to_string(row) +
                               ": label must be a non-negative integer");
    }
    max_label = std::max(max_label, label);
    Tensor img({1, image_side, image_side});
    for (std::size_t p = 0; p < pixels; ++p) img[p] = cells[p + 1] / real(255);
    ds.samples.push_back(LabeledSample{std::move(img), label, std::nullopt});
  }
  if (ds.samples.empty()) throw std::runtime_error(path + ": empty file");
  ds.num_classes = num_classes ? num_classes
                               : static_cast<std::size_t>(max_label) + 1;
  if (static_cast<std::size_t>(max_label) >= ds.num_classes) {
    throw std::runtime_error(path + ": label " + std::to_string(max_label) +
                             " outside [0, " + std::to_string(ds.num_classes) +
                             ")");
  }
  return ds;
}

/// Stratified split: each class is partitioned separately, so both halves
/// keep the class mix. Splits are disjoint, jointly exhaustive, and
/// deterministic given the seed.
inline std::pair<Dataset, Dataset> split(const Dataset& dataset,
                                         double test_fraction,
                                         std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split: test_fraction must be in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    by_class[static_cast<std::size_t>(dataset.samples[i].label)].push_back(i);
  }
  Rng rng(seed);
  Dataset train, test;
  train.num_classes = test.num_classes = dataset.num_classes;
  train.num_aux_classes = test.num_aux_classes = dataset.num_aux_classes;
  train.tag = Split::train;
  test.tag = Split::test;
  train.provenance = dataset.provenance + "/train";
  test.provenance = dataset.provenance + "/test";
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::vector<std::size_t>& idx = by_class[c];
    const std::size_t n_test = static_cast<std::size_t>(
        std::floor(static_cast<double>(idx.size()) * test_fraction + 0.5));
    if (n_test == 0 || n_test >= idx.size()) {
      throw std::invalid_argument(
          "split: class " + std::to_string(c) + " has " +
          std::to_string(idx.size()) +
          " samples, too few to appear in both splits at fraction " +
          std::to_string(test_fraction));
    }
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < n_test ? test : train).samples.push_back(dataset.samples[idx[i]]);
    }
  }
  train.validate();
  return {std::move(train), std::move(test)};
}

/// Deterministic class-balanced subsample: the first `max_per_class`
/// samples of each class in dataset order. The cheap default slice for
/// probes.
inline Dataset balanced_slice(const Dataset& dataset,
                              std::size_t max_per_class) {
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.num_aux_classes = dataset.num_aux_classes;
  out.tag = dataset.tag;
  out.provenance = dataset.provenance + "/slice";
  std::vector<std::size_t> taken(dataset.num_classes, 0);
  for (const LabeledSample& s : dataset.samples) {
    std::size_t& t = taken[static_cast<std::size_t>(s.label)];
    if (t < max_per_class) {
      out.samples.push_back(s);
      ++t;
    }
  }
  return out;
}

}  // namespace cdj
