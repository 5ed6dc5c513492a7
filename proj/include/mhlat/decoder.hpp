#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "mhlat/autodiff.hpp"
#include "mhlat/param_store.hpp"

namespace mhlat {

// One independent linear scorer per label: row i of `weight` scores label i.
struct ClassifierParams {
  Tensor weight;  // C×d
  Tensor bias;    // C×1

  static ClassifierParams create(ParamStore& params, std::size_t labels, std::size_t d_model,
                                 Rng& rng) {
    ClassifierParams p;
    p.weight = params.add("head.classifier.weight", xavier_uniform(labels, d_model, rng),
                          ParamKind::weight, ParamScope::head);
    p.bias = params.add("head.classifier.bias", RealMatrix(labels, 1), ParamKind::bias,
                        ParamScope::head);
    return p;
  }
};

// logit_i = ⟨w_i, e_i⟩ + b_i. Label i's scorer only sees label i's row.
inline Tensor score_labels(Tape& tape, const Tensor& label_repr, const ClassifierParams& p) {
  if (p.weight.rows() != label_repr.rows() || p.weight.cols() != label_repr.cols() ||
      p.bias.rows() != label_repr.rows() || p.bias.cols() != 1)
    throw ShapeError(detail::concat("score_labels: E", label_repr.shape_str(), " W",
                                    p.weight.shape_str(), " b", p.bias.shape_str()));
  return add(tape, row_dot(tape, label_repr, p.weight), p.bias);
}

// Multi-label binary cross-entropy summed over labels (sigmoid in logit form).
inline Tensor bce_loss(Tape& tape, const Tensor& logits, std::span<const std::uint8_t> gold) {
  return bce_with_logits(tape, logits, gold);
}

// Descending score, ties by ascending label index.
inline std::vector<std::size_t> rank_labels(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct Prediction {
  std::vector<std::uint8_t> flags;
  std::vector<std::size_t> ranking;
};

inline Prediction predict(std::span<const double> logits, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError(detail::concat("decision threshold ", threshold, " must lie in (0, 1)"));
  Prediction out;
  out.flags.reserve(logits.size());
  for (double z : logits) out.flags.push_back(stable_sigmoid(z) > threshold ? 1 : 0);
  out.ranking = rank_labels(logits);
  return out;
}

}  // namespace mhlat
