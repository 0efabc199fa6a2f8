#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "VAMP"            4 bytes magic
//   u32               format version (1)
//   u64               length of the JSON header in bytes
//   JSON header       {"model": {...}, "tensors": [{"name", "shape"}, ...]}
//   per tensor        u32 rank, u64 extent[rank], f64 value[numel]
//
// Tensors appear in Model::parameters() order, frozen ones included.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "vampvae/errors.hpp"
#include "vampvae/models.hpp"

namespace vampvae {

inline constexpr char kCheckpointMagic[4] = {'V', 'A', 'M', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"levels", s.levels},
          {"data_dim", s.data_dim},
          {"latent1", s.latent1},
          {"latent2", s.latent2},
          {"hidden", s.hidden},
          {"hidden_layers", s.hidden_layers},
          {"likelihood", likelihood_name(s.likelihood)},
          {"prior", prior_name(s.prior)},
          {"components", s.components},
          {"pseudo_unit_domain", s.pseudo_unit_domain},
          {"image_height", s.image_height},
          {"image_width", s.image_width}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.levels = j.at("levels").get<int>();
  s.data_dim = j.at("data_dim").get<std::size_t>();
  s.latent1 = j.at("latent1").get<std::size_t>();
  s.latent2 = j.at("latent2").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.hidden_layers = j.at("hidden_layers").get<std::size_t>();
  auto lik = parse_likelihood(j.at("likelihood").get<std::string>());
  auto prior = parse_prior_kind(j.at("prior").get<std::string>());
  if (!lik || !prior) throw std::invalid_argument("unknown likelihood or prior name");
  s.likelihood = *lik;
  s.prior = *prior;
  s.components = j.at("components").get<std::size_t>();
  s.pseudo_unit_domain = j.at("pseudo_unit_domain").get<bool>();
  s.image_height = j.at("image_height").get<std::size_t>();
  s.image_width = j.at("image_width").get<std::size_t>();
  return s;
}

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <class T>
  T le(const char* what) {
    auto raw = take(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(raw[i])) << (8 * i);
    return v;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
  ParameterList params = m.parameters();
  nlohmann::json header;
  header["model"] = to_json(m.spec);
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params) header["tensors"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& p : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) detail::put_le<std::uint64_t>(out, e);
    for (double v : p.tensor.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

/// Parses a checkpoint. Throws FormatError (with byte offset) on bad magic,
/// unsupported version, truncation, or a manifest that does not match the
/// architecture; nothing is returned on failure.
inline Model deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes", 0);
  const std::size_t version_at = in.offset();
  const auto version = in.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")",
                      version_at);
  }
  const auto header_len = in.le<std::uint64_t>("header length");
  const std::size_t header_at = in.offset();
  auto text = in.take(header_len, "JSON header");

  Model m;
  nlohmann::json manifest;
  try {
    nlohmann::json header = nlohmann::json::parse(text);
    Rng scratch(0);
    m = Model::build(model_spec_from_json(header.at("model")), scratch);
    manifest = header.at("tensors");
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid checkpoint header: ") + e.what(), header_at);
  }

  ParameterList params = m.parameters();
  if (manifest.size() != params.size()) throw FormatError("tensor count does not match the model architecture", header_at);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (manifest[i].value("name", "") != params[i].name) {
      throw FormatError("unexpected tensor '" + manifest[i].value("name", "") + "', expected '" + params[i].name + "'", header_at);
    }
  }
  for (auto& p : params) {
    const std::size_t at = in.offset();
    const auto rank = in.le<std::uint32_t>("tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(in.le<std::uint64_t>("tensor extent"));
    if (shape != p.tensor.shape()) {
      throw FormatError("tensor " + p.name + " has shape " + shape_string(shape) + ", expected " +
                            shape_string(p.tensor.shape()),
                        at);
    }
    auto values = p.tensor.mutable_data();
    for (double& v : values) v = std::bit_cast<double>(in.le<std::uint64_t>("tensor values"));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after last tensor", in.offset());
  return m;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace vampvae
