#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhlat/data.hpp"
#include "mhlat/model.hpp"
#include "mhlat/param_store.hpp"

// Binary layout, all integers and reals little-endian:
//   "MHLT" | u32 version | u32 entry count |
//   per entry: u32 name length | name bytes | u64 rows | u64 cols | u8 tag |
//              rows·cols f64 values, row-major
// Tag byte: bit 0 = bias, bit 1 = head.
namespace mhlat::checkpoint {

inline constexpr std::array<char, 4> kMagic = {'M', 'H', 'L', 'T'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct Entry {
  std::string name;
  RealMatrix value;
  ParamKind kind;
  ParamScope scope;
};

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw DataError("truncated checkpoint " + path);
  return v;
}

}  // namespace detail

inline void save(const std::string& path, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic.data(), kMagic.size());
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put<std::uint64_t>(out, e.tensor.rows());
    detail::put<std::uint64_t>(out, e.tensor.cols());
    detail::put<std::uint8_t>(out, encode_tag(e.kind, e.scope));
    const auto& data = e.tensor.value().data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed while writing checkpoint " + path);
}

inline std::vector<Entry> load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    throw DataError(path + " is not an MHLT checkpoint");
  const auto version = detail::get<std::uint32_t>(in, path);
  if (version != kVersion)
    throw DataError(mhlat::detail::concat(path, ": unsupported checkpoint version ", version));
  const auto count = detail::get<std::uint32_t>(in, path);
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = detail::get<std::uint32_t>(in, path);
    e.name.resize(name_len);
    if (!in.read(e.name.data(), name_len)) throw DataError("truncated checkpoint " + path);
    const auto rows = detail::get<std::uint64_t>(in, path);
    const auto cols = detail::get<std::uint64_t>(in, path);
    std::tie(e.kind, e.scope) = decode_tag(detail::get<std::uint8_t>(in, path));
    std::vector<double> values(rows * cols);
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double))))
      throw DataError("truncated checkpoint " + path);
    e.value = RealMatrix(rows, cols, std::move(values));
    entries.push_back(std::move(e));
  }
  return entries;
}

// Copies checkpoint values into a store with the identical parameter layout.
inline void load_into(ParamStore& params, const std::vector<Entry>& entries) {
  if (entries.size() != params.size())
    throw DataError(mhlat::detail::concat("checkpoint holds ", entries.size(),
                                          " tensors, model expects ", params.size()));
  for (const auto& e : entries) {
    const auto& target = params.entry(e.name);
    if (target.kind != e.kind || target.scope != e.scope)
      throw DataError("checkpoint tag mismatch for " + e.name);
    Tensor t = target.tensor;
    if (t.rows() != e.value.rows() || t.cols() != e.value.cols())
      throw ShapeError(mhlat::detail::concat("checkpoint tensor ", e.name, " is ",
                                             e.value.shape_str(), ", model expects ",
                                             t.shape_str()));
    t.mutable_value() = e.value;
  }
}

// Everything besides tensors needed to rebuild the model: config, label
// space and vocabulary. Stored next to the binary as "<ckpt>.meta.json".
struct Metadata {
  ModelConfig config;
  LabelSpace labels;
  Vocab vocab;
};

inline std::string metadata_path(const std::string& ckpt_path) { return ckpt_path + ".meta.json"; }

inline void save_metadata(const std::string& ckpt_path, const Metadata& meta) {
  nlohmann::ordered_json j;
  j["config"] = to_json(meta.config);
  j["labels"] = meta.labels.labels();
  j["vocab"] = meta.vocab.tokens();
  std::ofstream out(metadata_path(ckpt_path), std::ios::binary);
  if (!out) throw DataError("cannot write " + metadata_path(ckpt_path));
  out << j.dump(2) << '\n';
}

inline Metadata load_metadata(const std::string& ckpt_path) {
  const std::string path = metadata_path(ckpt_path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint metadata " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  Metadata meta;
  meta.config = config_from_json(j.at("config"));
  meta.labels = LabelSpace(j.at("labels").get<std::vector<std::string>>());
  meta.vocab = Vocab(j.at("vocab").get<std::vector<std::string>>());
  return meta;
}

inline void save_model(const std::string& path, const Model& model, const LabelSpace& labels,
                       const Vocab& vocab) {
  save(path, model.params());
  save_metadata(path, {model.config(), labels, vocab});
}

struct LoadedModel {
  Model model;
  LabelSpace labels;
  Vocab vocab;
};

inline LoadedModel load_model(const std::string& path) {
  Metadata meta = load_metadata(path);
  if (meta.config.C != meta.labels.size())
    throw DataError(mhlat::detail::concat("label-space mismatch: checkpoint config expects C=",
                                          meta.config.C, ", label space has C=",
                                          meta.labels.size()));
  Model model = Model::create(meta.config, meta.vocab.size());
  load_into(model.params(), load(path));
  return {std::move(model), std::move(meta.labels), std::move(meta.vocab)};
}

}  // namespace mhlat::checkpoint
