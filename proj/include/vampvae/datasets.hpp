#pragma once

// Dataset ingestion: IDX (MNIST distribution format), a raw little-endian
// float64 matrix interchange format, canonical splits, and a synthetic
// clustered binary generator for desk-scale runs.
//
// Raw-matrix format: either a bare payload of N*D little-endian f64 values
// (D supplied by the caller), or an ASCII header line "RAW <N> <D>\n"
// followed by the same payload.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vampvae/errors.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

enum class Binarization { None, Static, Dynamic };

struct Dataset {
  std::string name;
  std::size_t dim = 0;
  Matrix train;
  Matrix val;
  Matrix test;
  Binarization binarization = Binarization::None;
  std::size_t image_height = 0;
  std::size_t image_width = 0;

  /// Values in [0, 1], equal row widths, and binary values for static data.
  void validate() const {
    for (const Matrix* m : {&train, &val, &test}) {
      if (!m->empty() && m->cols != dim) throw DimensionError("dataset split width does not match D");
      for (double v : m->data) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("dataset values must lie in [0, 1]");
        if (binarization == Binarization::Static && v != 0.0 && v != 1.0) {
          throw DomainError("static binarized dataset contains a non-binary value");
        }
      }
    }
  }
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(std::string_view bytes, std::size_t at) {
  if (bytes.size() < at + 4) throw FormatError("truncated IDX header", bytes.size());
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Decodes an unsigned-byte 3-D IDX tensor into an N x (H*W) matrix scaled by 1/255.
inline Matrix parse_idx_images(std::string_view bytes, std::size_t* height = nullptr, std::size_t* width = nullptr) {
  const std::uint32_t magic = detail::read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << "bad IDX magic 0x" << std::hex << magic << " (expected 0x00000803)";
    throw FormatError(msg.str(), 0);
  }
  const std::size_t n = detail::read_be32(bytes, 4);
  const std::size_t h = detail::read_be32(bytes, 8);
  const std::size_t w = detail::read_be32(bytes, 12);
  const std::size_t header = 16;
  if (h * w != 0 && n > (bytes.size() - header) / (h * w)) {
    throw FormatError("IDX header declares " + std::to_string(n) + " images of " + std::to_string(h) + "x" +
                          std::to_string(w) + ", payload is " + std::to_string(bytes.size() - header) + " bytes",
                      bytes.size());
  }
  const std::size_t need = n * h * w;
  if (bytes.size() - header < need) {
    throw FormatError("IDX payload holds " + std::to_string(bytes.size() - header) + " bytes, header declares " +
                          std::to_string(need),
                      bytes.size());
  }
  if (height) *height = h;
  if (width) *width = w;
  Matrix out(n, h * w);
  for (std::size_t i = 0; i < need; ++i) out.data[i] = static_cast<unsigned char>(bytes[header + i]) / 255.0;
  return out;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::string_view bytes) {
  const std::uint32_t magic = detail::read_be32(bytes, 0);
  if (magic != kIdxLabelMagic) throw FormatError("bad IDX label magic", 0);
  const std::size_t n = detail::read_be32(bytes, 4);
  if (bytes.size() - 8 < n) throw FormatError("IDX label payload shorter than declared", bytes.size());
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(bytes[8 + i]);
  return out;
}

struct IdxData {
  Matrix images;
  std::vector<std::uint8_t> labels;  // empty when no label file was given
  std::size_t height = 0;
  std::size_t width = 0;
};

inline IdxData load_idx(const std::string& images_path, const std::optional<std::string>& labels_path = std::nullopt) {
  IdxData out;
  out.images = parse_idx_images(detail::read_file(images_path), &out.height, &out.width);
  if (labels_path) {
    out.labels = parse_idx_labels(detail::read_file(*labels_path));
    if (out.labels.size() != out.images.rows) throw FormatError("label count does not match image count", 4);
  }
  return out;
}

/// Parses the raw-matrix format. `dim` is required for header-less payloads
/// and, when non-zero, must agree with a header. Values are multiplied by
/// `scale` then clamped to [0, 1].
inline Matrix parse_raw_matrix(std::string_view bytes, std::size_t dim, double scale = 1.0) {
  if (bytes.empty()) throw FormatError("empty raw-matrix file", 0);
  std::size_t offset = 0;
  std::size_t rows = 0;
  if (bytes.substr(0, 4) == "RAW ") {
    const std::size_t eol = bytes.find('\n');
    if (eol == std::string_view::npos) throw FormatError("raw-matrix header line is not terminated", bytes.size());
    std::istringstream header(std::string(bytes.substr(4, eol - 4)));
    std::size_t n = 0, d = 0;
    if (!(header >> n >> d) || d == 0) throw FormatError("malformed raw-matrix header", 4);
    if (dim != 0 && dim != d) throw FormatError("raw-matrix header D=" + std::to_string(d) + " but D=" + std::to_string(dim) + " was requested", 4);
    dim = d;
    rows = n;
    offset = eol + 1;
    if (bytes.size() - offset != n * d * 8) {
      throw FormatError("raw-matrix payload is " + std::to_string(bytes.size() - offset) + " bytes, header declares " +
                            std::to_string(n * d * 8),
                        offset);
    }
  } else {
    if (dim == 0) throw FormatError("header-less raw matrix needs an explicit D", 0);
    if (bytes.size() % (dim * 8) != 0) {
      throw FormatError("raw-matrix size " + std::to_string(bytes.size()) + " is not a multiple of D*8", bytes.size());
    }
    rows = bytes.size() / (dim * 8);
  }
  Matrix out(rows, dim);
  for (std::size_t i = 0; i < rows * dim; ++i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i * 8 + b])) << (8 * b);
    const double v = std::bit_cast<double>(bits) * scale;
    if (!std::isfinite(v)) throw FormatError("non-finite value in raw matrix", offset + i * 8);
    out.data[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

inline Matrix load_raw_matrix(const std::string& path, std::size_t dim, double scale = 1.0) {
  return parse_raw_matrix(detail::read_file(path), dim, scale);
}

inline std::string serialize_raw_matrix(const Matrix& m, bool with_header = true) {
  std::string out;
  if (with_header) out = "RAW " + std::to_string(m.rows) + " " + std::to_string(m.cols) + "\n";
  out.reserve(out.size() + m.data.size() * 8);
  for (double v : m.data) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (std::size_t b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  return out;
}

inline void save_raw_matrix(const Matrix& m, const std::string& path, bool with_header = true) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_raw_matrix(m, with_header);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Moves `n_val` rows out of `train` into a validation split: the last rows
/// when `seed` is empty, otherwise a seeded random subset.
inline void split_validation(const Matrix& full, std::size_t n_val, const std::optional<std::uint64_t>& seed,
                             Matrix& train, Matrix& val) {
  if (n_val >= full.rows) throw ContractError("validation split needs fewer rows than the training set");
  std::vector<std::size_t> idx(full.rows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (seed) {
    Rng rng(*seed);
    rng.shuffle(idx.begin(), idx.end());
    std::vector<std::size_t> val_idx(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    train = full.gather_rows(train_idx);
    val = full.gather_rows(val_idx);
  } else {
    train = full.slice_rows(0, full.rows - n_val);
    val = full.slice_rows(full.rows - n_val, full.rows);
  }
}

inline constexpr std::uint64_t kSplitSeed = 20170101;

/// Canonical train/val/test splits.
///   mnist:    60,000 + 10,000 rows; the last 10,000 training rows become validation.
///   omniglot: 24,345 + 8,070 rows; 1,345 training rows chosen with a fixed seed.
/// `binarization` selects static (inputs must already be binary) or dynamic.
inline Dataset canonical_split(const std::string& name, const Matrix& train_matrix, const Matrix& test_matrix,
                               Binarization binarization = Binarization::Dynamic) {
  Dataset ds;
  ds.name = name;
  ds.dim = train_matrix.cols;
  ds.binarization = binarization;
  if (name == "mnist") {
    if (train_matrix.rows != 60000 || test_matrix.rows != 10000) {
      throw ContractError("mnist split expects 60000 training and 10000 test rows, got " +
                          std::to_string(train_matrix.rows) + " and " + std::to_string(test_matrix.rows));
    }
    split_validation(train_matrix, 10000, std::nullopt, ds.train, ds.val);
    ds.image_height = ds.image_width = 28;
  } else if (name == "omniglot") {
    if (train_matrix.rows != 24345 || test_matrix.rows != 8070) {
      throw ContractError("omniglot split expects 24345 training and 8070 test rows");
    }
    split_validation(train_matrix, 1345, kSplitSeed, ds.train, ds.val);
    ds.image_height = ds.image_width = 28;
  } else {
    throw ContractError("no canonical split for dataset '" + name + "'");
  }
  ds.test = test_matrix;
  ds.validate();
  return ds;
}

namespace detail {

// Random binary prototypes, each redrawn until it differs from every earlier
// one in at least ceil(D/4) positions.
inline Matrix draw_prototypes(std::size_t dim, std::size_t k, Rng& rng) {
  const std::size_t min_distance = (dim + 3) / 4;
  Matrix prototypes(k, dim);
  for (std::size_t c = 0; c < k; ++c) {
    bool accepted = false;
    for (int attempt = 0; attempt < 10000 && !accepted; ++attempt) {
      for (std::size_t j = 0; j < dim; ++j) prototypes(c, j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
      accepted = true;
      for (std::size_t p = 0; p < c && accepted; ++p) {
        std::size_t distance = 0;
        for (std::size_t j = 0; j < dim; ++j) distance += prototypes(c, j) != prototypes(p, j);
        accepted = distance >= min_distance;
      }
    }
    if (!accepted) throw ContractError("synth_clusters: cannot place " + std::to_string(k) + " separated prototypes in D=" + std::to_string(dim));
  }
  return prototypes;
}

}  // namespace detail

/// Prototypes used by synth_clusters for the same (D, k, seed).
inline Matrix synth_prototypes(std::size_t dim, std::size_t k_clusters, std::uint64_t seed) {
  Rng rng(seed);
  return detail::draw_prototypes(dim, k_clusters, rng);
}

/// Mixture of k well-separated product-Bernoulli prototypes with independent
/// bit flips at rate `flip_noise`. Any two prototypes differ in at least D/4
/// positions. Rows are split 70/15/15 into train/val/test.
inline Dataset synth_clusters(std::size_t n, std::size_t dim, std::size_t k_clusters, std::uint64_t seed,
                              double flip_noise = 0.05) {
  if (k_clusters == 0) throw ContractError("synth_clusters: k_clusters must be >= 1");
  if (dim == 0 || n == 0) throw ContractError("synth_clusters: n and D must be >= 1");
  Rng rng(seed);
  const Matrix prototypes = detail::draw_prototypes(dim, k_clusters, rng);

  Matrix all(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.index(k_clusters);
    for (std::size_t j = 0; j < dim; ++j) {
      const bool flip = rng.bernoulli(flip_noise);
      all(i, j) = flip ? 1.0 - prototypes(c, j) : prototypes(c, j);
    }
  }

  Dataset ds;
  ds.name = "synth";
  ds.dim = dim;
  ds.binarization = Binarization::Static;
  const std::size_t n_train = n * 70 / 100;
  const std::size_t n_val = n * 15 / 100;
  ds.train = all.slice_rows(0, n_train);
  ds.val = all.slice_rows(n_train, n_train + n_val);
  ds.test = all.slice_rows(n_train + n_val, n);
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dim))));
  if (side * side == dim) {
    ds.image_height = ds.image_width = side;
  } else {
    ds.image_height = 1;
    ds.image_width = dim;
  }
  return ds;
}

}  // namespace vampvae
