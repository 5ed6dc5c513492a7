#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mhlat/autodiff.hpp"

namespace mhlat {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnknownId = 1;

// A token sequence split into k rows of exactly L ids. Only the last chunk
// may carry padding, always as a contiguous suffix.
struct ChunkedDocument {
  std::size_t chunk_len = 0;
  std::size_t n = 0;
  std::vector<std::vector<TokenId>> chunks;
  std::vector<std::vector<std::uint8_t>> mask;

  std::size_t k() const noexcept { return chunks.size(); }
};

inline ChunkedDocument chunk(std::span<const TokenId> tokens, std::size_t chunk_len) {
  if (chunk_len < 1) throw ConfigError("chunk length L must be at least 1");
  if (tokens.empty()) throw DataError("cannot chunk an empty token sequence");

  ChunkedDocument doc;
  doc.chunk_len = chunk_len;
  doc.n = tokens.size();
  const std::size_t k = (tokens.size() + chunk_len - 1) / chunk_len;
  doc.chunks.assign(k, std::vector<TokenId>(chunk_len, kPadId));
  doc.mask.assign(k, std::vector<std::uint8_t>(chunk_len, 0));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    doc.chunks[i / chunk_len][i % chunk_len] = tokens[i];
    doc.mask[i / chunk_len][i % chunk_len] = 1;
  }
  return doc;
}

// Real (unpadded) token ids in original order.
inline std::vector<TokenId> flatten(const ChunkedDocument& doc) {
  std::vector<TokenId> out;
  out.reserve(doc.n);
  for (std::size_t c = 0; c < doc.k(); ++c)
    for (std::size_t j = 0; j < doc.chunk_len; ++j)
      if (doc.mask[c][j]) out.push_back(doc.chunks[c][j]);
  return out;
}

struct GlobalFeatures {
  Tensor features;                   // n × d, pad rows removed
  std::vector<std::uint8_t> mask;    // k·L validity flags the rows were selected by
};

// Stacks per-chunk features in order and drops the padded positions.
inline GlobalFeatures global_concat(Tape& tape, std::span<const Tensor> chunk_features,
                                    const ChunkedDocument& doc) {
  if (chunk_features.size() != doc.k())
    throw ShapeError(detail::concat("global_concat: ", chunk_features.size(),
                                    " feature blocks for a document with ", doc.k(), " chunks"));
  for (const auto& f : chunk_features) {
    if (f.rows() != doc.chunk_len || f.cols() != chunk_features.front().cols())
      throw ShapeError(detail::concat("global_concat: chunk features ", f.shape_str(),
                                      " do not match L=", doc.chunk_len, " and shared width"));
  }
  GlobalFeatures out;
  out.mask.reserve(doc.k() * doc.chunk_len);
  std::vector<std::size_t> keep;
  keep.reserve(doc.n);
  for (std::size_t c = 0; c < doc.k(); ++c) {
    for (std::size_t j = 0; j < doc.chunk_len; ++j) {
      out.mask.push_back(doc.mask[c][j]);
      if (doc.mask[c][j]) keep.push_back(c * doc.chunk_len + j);
    }
  }
  Tensor stacked = chunk_features.size() == 1 ? chunk_features.front()
                                              : concat_rows(tape, chunk_features);
  out.features = keep.size() == stacked.rows() ? stacked : take_rows(tape, stacked, keep);
  return out;
}

}  // namespace mhlat
