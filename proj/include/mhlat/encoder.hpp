#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mhlat/autodiff.hpp"
#include "mhlat/chunking.hpp"
#include "mhlat/param_store.hpp"

namespace mhlat {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t chunk_len = 0;  // L
  std::size_t d_model = 0;    // d_m
  std::size_t blocks = 1;     // B
};

// Parameters of one post-norm, single-head transformer block. There is no key
// bias: q·b_k is constant across keys, so softmax cancels it exactly.
struct EncoderBlock {
  Tensor wq, bq, wk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor ln2_gain, ln2_bias;
};

// Small trainable transformer applied with one shared parameter set to every
// chunk of a document. Stands in for a pretrained encoder behind the same
// chunk → L×d_m signature.
class Encoder {
 public:
  Encoder() = default;

  // Registers every tensor in `params` under "encoder.*" with weight/bias tags.
  static Encoder create(ParamStore& params, const EncoderConfig& config, Rng& rng) {
    if (config.vocab_size < 2 || config.chunk_len < 1 || config.d_model < 1 || config.blocks < 1)
      throw ConfigError("encoder needs vocab_size >= 2, L >= 1, d_m >= 1 and B >= 1");
    Encoder enc;
    enc.config_ = config;
    const std::size_t d = config.d_model;
    const std::size_t ff = 4 * d;
    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
      return params.add("encoder." + name, xavier_uniform(r, c, rng), ParamKind::weight,
                        ParamScope::encoder);
    };
    auto bias = [&](const std::string& name, std::size_t c) {
      return params.add("encoder." + name, RealMatrix(1, c), ParamKind::bias, ParamScope::encoder);
    };
    auto gain = [&](const std::string& name, std::size_t c) {
      return params.add("encoder." + name, RealMatrix(1, c, 1.0), ParamKind::weight,
                        ParamScope::encoder);
    };

    enc.token_embedding_ = weight("token_embedding", config.vocab_size, d);
    enc.position_embedding_ = weight("position_embedding", config.chunk_len, d);
    for (std::size_t b = 0; b < config.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      EncoderBlock blk;
      blk.wq = weight(p + "attn.wq", d, d);
      blk.bq = bias(p + "attn.bq", d);
      blk.wk = weight(p + "attn.wk", d, d);
      blk.wv = weight(p + "attn.wv", d, d);
      blk.bv = bias(p + "attn.bv", d);
      blk.wo = weight(p + "attn.wo", d, d);
      blk.bo = bias(p + "attn.bo", d);
      blk.ln1_gain = gain(p + "ln1.gain", d);
      blk.ln1_bias = bias(p + "ln1.bias", d);
      blk.ff1_w = weight(p + "ff1.w", ff, d);
      blk.ff1_b = bias(p + "ff1.b", ff);
      blk.ff2_w = weight(p + "ff2.w", d, ff);
      blk.ff2_b = bias(p + "ff2.b", d);
      blk.ln2_gain = gain(p + "ln2.gain", d);
      blk.ln2_bias = bias(p + "ln2.bias", d);
      enc.blocks_.push_back(std::move(blk));
    }
    return enc;
  }

  const EncoderConfig& config() const noexcept { return config_; }

  // L×d_m features for one chunk. Padded keys are masked out of self-attention,
  // so real positions never see pad content.
  Tensor encode_chunk(Tape& tape, std::span<const TokenId> chunk,
                      std::span<const std::uint8_t> mask) const {
    if (chunk.size() != config_.chunk_len || mask.size() != config_.chunk_len)
      throw ShapeError(detail::concat("encode_chunk: expected ", config_.chunk_len,
                                      " ids and flags, got ", chunk.size(), " and ", mask.size()));
    std::vector<std::size_t> ids(chunk.size());
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      if (chunk[i] >= config_.vocab_size)
        throw DataError(detail::concat("token id ", chunk[i], " at position ", i,
                                       " is outside the vocabulary (V=", config_.vocab_size, ")"));
      ids[i] = chunk[i];
    }
    Tensor x = add(tape, take_rows(tape, token_embedding_, ids), position_embedding_);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
    for (const auto& blk : blocks_) {
      Tensor q = affine(tape, x, blk.wq, blk.bq);
      Tensor k = matmul_nt(tape, x, blk.wk);
      Tensor v = affine(tape, x, blk.wv, blk.bv);
      Tensor scores = scale(tape, matmul_nt(tape, q, k), inv_sqrt_d);
      Tensor attn = matmul(tape, row_softmax(tape, scores, mask), v);
      Tensor h = layer_norm(tape, add(tape, x, affine(tape, attn, blk.wo, blk.bo)), blk.ln1_gain,
                            blk.ln1_bias);
      Tensor ff = affine(tape, relu(tape, affine(tape, h, blk.ff1_w, blk.ff1_b)), blk.ff2_w,
                         blk.ff2_b);
      x = layer_norm(tape, add(tape, h, ff), blk.ln2_gain, blk.ln2_bias);
    }
    return x;
  }

  // n×d_m context for the whole document: every chunk through the same
  // parameters, then concatenated with pad rows dropped.
  Tensor encode_document(Tape& tape, const ChunkedDocument& doc) const {
    if (doc.chunk_len != config_.chunk_len)
      throw ShapeError(detail::concat("document chunked with L=", doc.chunk_len,
                                      " but encoder expects L=", config_.chunk_len));
    std::vector<Tensor> features;
    features.reserve(doc.k());
    for (std::size_t c = 0; c < doc.k(); ++c)
      features.push_back(encode_chunk(tape, doc.chunks[c], doc.mask[c]));
    return global_concat(tape, features, doc).features;
  }

 private:
  EncoderConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<EncoderBlock> blocks_;
};

}  // namespace mhlat
