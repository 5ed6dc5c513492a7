#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhlat/decoder.hpp"
#include "mhlat/tensor.hpp"

namespace mhlat::metrics {

namespace detail {

inline void require_same_shape(std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
  if (r1 != r2 || c1 != c2)
    throw ShapeError(mhlat::detail::concat("metrics: shape mismatch [", r1, "x", c1, "] vs [", r2,
                                           "x", c2, "]"));
}

inline double f1_from_counts(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

// Rank-sum AUC with mid-ranks for ties: P(s⁺ > s⁻) + ½·P(tie).
inline double rank_auc(std::vector<std::pair<double, bool>> cells) {
  std::sort(cells.begin(), cells.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double positives = 0.0;
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < cells.size()) {
    std::size_t j = i;
    while (j < cells.size() && cells[j].first == cells[i].first) ++j;
    // 1-based ranks i+1 .. j share their mean.
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (cells[t].second) {
        positives += 1.0;
        rank_sum += mid_rank;
      }
    }
    i = j;
  }
  const double negatives = static_cast<double>(cells.size()) - positives;
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

}  // namespace detail

// Pooled over every (document, label) cell. 0/0 is 0.
inline double micro_f1(const FlagMatrix& pred, const FlagMatrix& gold) {
  detail::require_same_shape(pred.rows(), pred.cols(), gold.rows(), gold.cols());
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    tp += (pred[i] && gold[i]) ? 1 : 0;
    fp += (pred[i] && !gold[i]) ? 1 : 0;
    fn += (!pred[i] && gold[i]) ? 1 : 0;
  }
  return detail::f1_from_counts(tp, fp, fn);
}

inline std::vector<double> per_label_f1(const FlagMatrix& pred, const FlagMatrix& gold) {
  detail::require_same_shape(pred.rows(), pred.cols(), gold.rows(), gold.cols());
  std::vector<double> out(pred.cols());
  for (std::size_t c = 0; c < pred.cols(); ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t r = 0; r < pred.rows(); ++r) {
      const bool p = pred(r, c) != 0;
      const bool g = gold(r, c) != 0;
      tp += (p && g) ? 1 : 0;
      fp += (p && !g) ? 1 : 0;
      fn += (!p && g) ? 1 : 0;
    }
    out[c] = detail::f1_from_counts(tp, fp, fn);
  }
  return out;
}

// Mean per-label F1 over all C labels, including labels that never occur.
inline double macro_f1(const FlagMatrix& pred, const FlagMatrix& gold) {
  const auto f1 = per_label_f1(pred, gold);
  if (f1.empty()) return 0.0;
  double total = 0.0;
  for (double v : f1) total += v;
  return total / static_cast<double>(f1.size());
}

inline double precision_at_k(const RealMatrix& scores, const FlagMatrix& gold, std::size_t k) {
  detail::require_same_shape(scores.rows(), scores.cols(), gold.rows(), gold.cols());
  if (k == 0 || k > scores.cols())
    throw ConfigError(mhlat::detail::concat("P@", k, " is undefined for ", scores.cols(),
                                            " labels (need 1 <= k <= C)"));
  if (scores.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto ranking = rank_labels(scores.row(r));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) hits += gold(r, ranking[i]) ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  return total / static_cast<double>(scores.rows());
}

enum class AucMode { macro, micro };

inline double auc(const RealMatrix& scores, const FlagMatrix& gold, AucMode mode) {
  detail::require_same_shape(scores.rows(), scores.cols(), gold.rows(), gold.cols());
  if (mode == AucMode::micro) {
    std::vector<std::pair<double, bool>> cells;
    cells.reserve(scores.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      cells.emplace_back(scores[i], gold[i] != 0);
      pos += gold[i] ? 1 : 0;
    }
    if (pos == 0) throw DataError("micro-AUC undefined: no positive cells");
    if (pos == cells.size()) throw DataError("micro-AUC undefined: no negative cells");
    return detail::rank_auc(std::move(cells));
  }
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    std::vector<std::pair<double, bool>> cells;
    std::size_t pos = 0;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      cells.emplace_back(scores(r, c), gold(r, c) != 0);
      pos += gold(r, c) ? 1 : 0;
    }
    if (pos == 0 || pos == cells.size()) continue;
    total += detail::rank_auc(std::move(cells));
    ++valid;
  }
  if (valid == 0)
    throw DataError("macro-AUC undefined: no label has both a positive and a negative document");
  return total / static_cast<double>(valid);
}

// Highest micro-F1 any document-independent prediction can reach on `gold`:
// predicting the m most frequent labels for every document, best m.
inline double best_constant_micro_f1(const FlagMatrix& gold) {
  std::vector<double> counts(gold.cols(), 0.0);
  double positives = 0.0;
  for (std::size_t r = 0; r < gold.rows(); ++r)
    for (std::size_t c = 0; c < gold.cols(); ++c)
      if (gold(r, c)) {
        counts[c] += 1.0;
        positives += 1.0;
      }
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const double docs = static_cast<double>(gold.rows());
  double best = 0.0;
  double tp = 0.0;
  for (std::size_t m = 1; m <= counts.size(); ++m) {
    tp += counts[m - 1];
    const double fp = static_cast<double>(m) * docs - tp;
    best = std::max(best, detail::f1_from_counts(tp, fp, positives - tp));
  }
  return best;
}

inline constexpr std::size_t kReportedK[] = {5, 8, 15};

struct MetricsReport {
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::optional<double> macro_auc;
  std::optional<double> micro_auc;
  std::map<std::size_t, std::optional<double>> p_at_k;
  // Metric name → reason, for every metric that is undefined on this data.
  std::map<std::string, std::string> errors;
};

inline MetricsReport evaluate(const RealMatrix& scores, const FlagMatrix& pred,
                              const FlagMatrix& gold) {
  MetricsReport rep;
  rep.macro_f1 = macro_f1(pred, gold);
  rep.micro_f1 = micro_f1(pred, gold);
  try {
    rep.macro_auc = auc(scores, gold, AucMode::macro);
  } catch (const DataError& e) {
    rep.errors["macro_auc"] = e.what();
  }
  try {
    rep.micro_auc = auc(scores, gold, AucMode::micro);
  } catch (const DataError& e) {
    rep.errors["micro_auc"] = e.what();
  }
  for (std::size_t k : kReportedK) {
    try {
      rep.p_at_k[k] = precision_at_k(scores, gold, k);
    } catch (const ConfigError& e) {
      rep.p_at_k[k] = std::nullopt;
      rep.errors["p_at_" + std::to_string(k)] = e.what();
    }
  }
  return rep;
}

inline nlohmann::ordered_json to_json(const MetricsReport& rep) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["f1"] = {{"macro", rep.macro_f1}, {"micro", rep.micro_f1}};
  j["auc"] = {{"macro", opt(rep.macro_auc)}, {"micro", opt(rep.micro_auc)}};
  nlohmann::ordered_json pk = nlohmann::ordered_json::object();
  for (const auto& [k, v] : rep.p_at_k) pk[std::to_string(k)] = opt(v);
  j["precision_at_k"] = pk;
  j["errors"] = rep.errors;
  return j;
}

inline std::string to_text(const MetricsReport& rep) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("error");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %10s %10s\n", "metric", "macro", "micro");
  out << line;
  std::snprintf(line, sizeof line, "%-12s %10.4f %10.4f\n", "F1", rep.macro_f1, rep.micro_f1);
  out << line;
  std::snprintf(line, sizeof line, "%-12s %10s %10s\n", "AUC", cell(rep.macro_auc).c_str(),
                cell(rep.micro_auc).c_str());
  out << line;
  for (const auto& [k, v] : rep.p_at_k) {
    std::snprintf(line, sizeof line, "%-12s %10s\n", ("P@" + std::to_string(k)).c_str(),
                  cell(v).c_str());
    out << line;
  }
  for (const auto& [name, why] : rep.errors) out << "  " << name << ": " << why << "\n";
  return out.str();
}

}  // namespace mhlat::metrics
