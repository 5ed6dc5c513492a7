#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mhlat/autodiff.hpp"
#include "mhlat/param_store.hpp"

namespace mhlat {

// Parameters of one hop. w_att is d×d, w_map is d×2d, b_map is 1×d.
// The fusion (w_map, b_map) is used for both the label and the context update.
struct HopParams {
  Tensor w_att;
  Tensor w_map;
  Tensor b_map;

  static HopParams create(ParamStore& params, const std::string& prefix, std::size_t d_model,
                          Rng& rng) {
    HopParams p;
    p.w_att = params.add(prefix + ".w_att", xavier_uniform(d_model, d_model, rng),
                         ParamKind::weight, ParamScope::head);
    p.w_map = params.add(prefix + ".w_map", xavier_uniform(d_model, 2 * d_model, rng),
                         ParamKind::weight, ParamScope::head);
    p.b_map = params.add(prefix + ".b_map", RealMatrix(1, d_model), ParamKind::bias,
                         ParamScope::head);
    return p;
  }
};

struct HopOutput {
  Tensor context;  // H̃, n×d
  Tensor labels;   // Ẽ, C×d
};

struct AttentionMaps {
  Tensor alpha;  // C×n, each label's distribution over tokens
  Tensor beta;   // n×C, each token's distribution over labels
};

namespace detail {

inline void check_hop_shapes(const Tensor& context, const Tensor& labels, const HopParams& p) {
  const std::size_t d = context.cols();
  if (context.rows() < 1 || labels.rows() < 1)
    throw ShapeError("hop: need at least one token and one label");
  if (labels.cols() != d || p.w_att.rows() != d || p.w_att.cols() != d ||
      p.w_map.rows() != d || p.w_map.cols() != 2 * d || p.b_map.rows() != 1 ||
      p.b_map.cols() != d)
    throw ShapeError(concat("hop: width mismatch H", context.shape_str(), " E",
                            labels.shape_str(), " W_att", p.w_att.shape_str(), " W_map",
                            p.w_map.shape_str(), " b_map", p.b_map.shape_str()));
}

// T = relu(E·W_attᵀ) · relu(H·W_attᵀ)ᵀ, C×n.
inline Tensor affinity(Tape& tape, const Tensor& context, const Tensor& labels,
                       const HopParams& p) {
  Tensor label_keys = relu(tape, matmul_nt(tape, labels, p.w_att));
  Tensor token_keys = relu(tape, matmul_nt(tape, context, p.w_att));
  return matmul_nt(tape, label_keys, token_keys);
}

inline HopOutput hop_impl(Tape& tape, const Tensor& context, const Tensor& labels,
                          const HopParams& p, bool update_context) {
  check_hop_shapes(context, labels, p);
  Tensor t = affinity(tape, context, labels, p);
  Tensor alpha = row_softmax(tape, t);
  Tensor z = matmul(tape, alpha, context);
  HopOutput out;
  out.labels = affine(tape, concat_cols(tape, z, labels), p.w_map, p.b_map);
  if (update_context) {
    Tensor beta = row_softmax(tape, transpose(tape, t));
    Tensor dctx = matmul(tape, beta, labels);
    out.context = affine(tape, concat_cols(tape, dctx, context), p.w_map, p.b_map);
  }
  return out;
}

}  // namespace detail

// One round of label→context and context→label attention; shapes are preserved.
inline HopOutput hop(Tape& tape, const Tensor& context, const Tensor& labels, const HopParams& p) {
  return detail::hop_impl(tape, context, labels, p, true);
}

inline AttentionMaps attention_maps(Tape& tape, const Tensor& context, const Tensor& labels,
                                    const HopParams& p) {
  detail::check_hop_shapes(context, labels, p);
  Tensor t = detail::affinity(tape, context, labels, p);
  return {row_softmax(tape, t), row_softmax(tape, transpose(tape, t))};
}

// Applies `num_hops` hops starting from (context, labels) and returns the final
// label representations. `hops` holds one entry per hop, or a single entry
// reused by every hop when parameters are shared. num_hops = 0 returns the
// label embedding untouched.
inline Tensor multi_hop(Tape& tape, const Tensor& context, const Tensor& labels,
                        std::span<const HopParams> hops, std::size_t num_hops) {
  if (num_hops == 0) return labels;
  if (hops.empty()) throw ConfigError("multi_hop: N > 0 hops requested with no hop parameters");
  if (hops.size() != 1 && hops.size() != num_hops)
    throw ConfigError(detail::concat("multi_hop: ", hops.size(), " hop parameter sets for N=",
                                     num_hops, " (expected N or 1 when shared)"));
  Tensor h = context;
  Tensor e = labels;
  for (std::size_t l = 0; l < num_hops; ++l) {
    const HopParams& p = hops.size() == 1 ? hops.front() : hops[l];
    // H̃ after the last hop is never consumed.
    HopOutput next = detail::hop_impl(tape, h, e, p, l + 1 < num_hops);
    h = next.context;
    e = next.labels;
  }
  return e;
}

// Final-hop α for inspection. For N = 0 there is no attention; returns an
// undefined tensor.
inline Tensor final_hop_alpha(Tape& tape, const Tensor& context, const Tensor& labels,
                              std::span<const HopParams> hops, std::size_t num_hops) {
  if (num_hops == 0) return {};
  Tensor h = context;
  Tensor e = labels;
  for (std::size_t l = 0; l + 1 < num_hops; ++l) {
    const HopParams& p = hops.size() == 1 ? hops.front() : hops[l];
    HopOutput next = hop(tape, h, e, p);
    h = next.context;
    e = next.labels;
  }
  const HopParams& last = hops.size() == 1 ? hops.front() : hops[num_hops - 1];
  return attention_maps(tape, h, e, last).alpha;
}

}  // namespace mhlat
