#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhlat/chunking.hpp"
#include "mhlat/data.hpp"
#include "mhlat/gradcheck.hpp"
#include "mhlat/metrics.hpp"
#include "mhlat/model.hpp"

namespace mhlat {

// Documents ready for the model: chunked token ids plus gold flags.
struct PreparedSplit {
  std::vector<std::string> ids;
  std::vector<ChunkedDocument> docs;
  std::vector<std::vector<std::uint8_t>> gold;

  std::size_t size() const noexcept { return docs.size(); }
};

inline PreparedSplit prepare(const std::vector<Example>& examples, const Vocab& vocab,
                             const LabelSpace& labels, std::size_t chunk_len) {
  PreparedSplit out;
  for (const auto& ex : examples) {
    out.ids.push_back(ex.id);
    out.docs.push_back(chunk(tokenize(ex, vocab), chunk_len));
    out.gold.push_back(gold_flags(ex, labels));
  }
  return out;
}

// ---- Optimizer -------------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed set of parameter names; moments exist only for those.
class Adam {
 public:
  Adam(ParamStore& params, const std::set<std::string>& trainable, AdamOptions options)
      : params_(&params), options_(options) {
    for (const auto& e : params.entries()) {
      if (!trainable.contains(e.name)) continue;
      slots_.push_back({e.tensor, RealMatrix(e.tensor.rows(), e.tensor.cols()),
                        RealMatrix(e.tensor.rows(), e.tensor.cols())});
      names_.insert(e.name);
    }
  }

  void step() {
    ++steps_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (auto& s : slots_) {
      const RealMatrix g = s.tensor.grad();
      auto& theta = s.tensor.mutable_value().data();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
        const double m_hat = s.m[i] / c1;
        const double v_hat = s.v[i] / c2;
        theta[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      }
    }
  }

  const std::set<std::string>& names() const noexcept { return names_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  struct Slot {
    Tensor tensor;
    RealMatrix m;
    RealMatrix v;
  };
  ParamStore* params_;
  AdamOptions options_;
  std::vector<Slot> slots_;
  std::set<std::string> names_;
  std::size_t steps_ = 0;
};

// ---- Evaluation --------------------------------------------------------------

struct EvalResult {
  RealMatrix logits;  // D×C
  FlagMatrix predicted;
  FlagMatrix gold;
  metrics::MetricsReport report;
};

// Forward-only logits for every document. Parameters are read-only here, so
// documents fan out across `threads` workers; each slot is written by one worker.
inline RealMatrix predict_logits(const Model& model, const PreparedSplit& split,
                                 std::size_t threads = 1) {
  const std::size_t labels = model.config().C;
  RealMatrix logits(split.size(), labels);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d < end; ++d) {
      Tape tape = Tape::inference();
      const Tensor z = model.forward(tape, split.docs[d]);
      std::copy(z.value().data().begin(), z.value().data().end(), logits.row(d).begin());
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(split.size(), 1));
  if (threads == 1) {
    work(0, split.size());
    return logits;
  }
  std::vector<std::thread> pool;
  const std::size_t per = (split.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = std::min(split.size(), t * per);
    const std::size_t end = std::min(split.size(), begin + per);
    pool.emplace_back(work, begin, end);
  }
  for (auto& th : pool) th.join();
  return logits;
}

inline EvalResult evaluate(const Model& model, const PreparedSplit& split, std::size_t threads = 1) {
  const std::size_t labels = model.config().C;
  for (const auto& g : split.gold)
    if (g.size() != labels)
      throw DataError(detail::concat("label-space mismatch: model expects C=", labels,
                                     ", data has C=", g.size()));
  EvalResult out;
  out.logits = predict_logits(model, split, threads);
  out.predicted = FlagMatrix(split.size(), labels);
  out.gold = FlagMatrix(split.size(), labels);
  for (std::size_t d = 0; d < split.size(); ++d) {
    const auto pred = predict(out.logits.row(d), model.config().threshold);
    std::copy(pred.flags.begin(), pred.flags.end(), out.predicted.row(d).begin());
    std::copy(split.gold[d].begin(), split.gold[d].end(), out.gold.row(d).begin());
  }
  out.report = metrics::evaluate(out.logits, out.predicted, out.gold);
  return out;
}

// {"id", "scores": [probabilities], "predicted": [labels]} per line.
inline void write_predictions(const std::string& path, const PreparedSplit& split,
                              const EvalResult& result, const LabelSpace& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t d = 0; d < split.size(); ++d) {
    nlohmann::ordered_json j;
    j["id"] = split.ids[d];
    std::vector<double> probs;
    std::vector<std::string> predicted;
    for (std::size_t c = 0; c < labels.size(); ++c) {
      probs.push_back(stable_sigmoid(result.logits(d, c)));
      if (result.predicted(d, c)) predicted.push_back(labels.label(c));
    }
    j["scores"] = probs;
    j["predicted"] = predicted;
    out << j.dump() << '\n';
  }
}

// CSV rows: doc_id,label_id,pos_1,weight_1,...,pos_t,weight_t using the final
// hop's α. Positions index the unpadded token sequence.
inline void write_attention(const std::string& path, const Model& model, const PreparedSplit& split,
                            const LabelSpace& labels, std::size_t top) {
  if (model.config().N == 0) throw ConfigError("attention dump needs N >= 1 hops");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "doc_id,label_id";
  for (std::size_t i = 1; i <= top; ++i) out << ",pos_" << i << ",weight_" << i;
  out << '\n';
  out.precision(17);
  for (std::size_t d = 0; d < split.size(); ++d) {
    Tape tape = Tape::inference();
    const Tensor alpha = model.final_attention(tape, split.docs[d]);
    for (std::size_t c = 0; c < alpha.rows(); ++c) {
      const auto order = rank_labels(alpha.value().row(c));
      out << split.ids[d] << ',' << labels.label(c);
      for (std::size_t i = 0; i < std::min(top, order.size()); ++i)
        out << ',' << order[i] << ',' << alpha.value()(c, order[i]);
      out << '\n';
    }
  }
}

// ---- Training ----------------------------------------------------------------

struct TrainOptions {
  std::size_t patience = 5;
  std::size_t eval_threads = 1;
  std::ostream* log = nullptr;
  // Stop after this many optimizer steps (0 = no limit).
  std::size_t max_steps = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  metrics::MetricsReport dev;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_dev_micro_f1 = -1.0;
  std::size_t steps = 0;
};

namespace detail {

inline std::string norm_summary(const ParamStore& params) {
  std::ostringstream out;
  for (const auto& e : params.entries()) {
    double sq = 0.0;
    for (double v : e.tensor.value().data()) sq += v * v;
    out << "\n  " << e.name << " |θ|=" << std::sqrt(sq);
  }
  return out.str();
}

}  // namespace detail

// Adam on the mean per-document loss of each batch, restricted to the
// partition of the configured tuning mode. Keeps the parameters of the best
// dev micro-F1 epoch (early stopping with `patience`) and leaves them loaded.
inline TrainResult train(Model& model, const PreparedSplit& train_split,
                         const PreparedSplit& dev_split, const TrainOptions& options = {}) {
  const ModelConfig& cfg = model.config();
  if (train_split.size() == 0 || dev_split.size() == 0)
    throw DataError("training needs non-empty train and dev splits");
  ParamStore& params = model.params();
  const auto trainable = partition_for_mode(params, cfg.tuning_mode);
  params.set_trainable(trainable);
  Adam adam(params, trainable, {cfg.lr});
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  ParamValues best = params.snapshot();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      params.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t d = order[i];
        Tape tape;
        Tensor loss = model.loss(tape, train_split.docs[d], train_split.gold[d]);
        if (!std::isfinite(loss.item()))
          throw NumericError(detail::concat("non-finite loss at epoch ", epoch, ", batch ", batch,
                                            " (document ", train_split.ids[d],
                                            "); parameter norms:", detail::norm_summary(params)));
        epoch_loss += loss.item();
        if (loss.requires_grad()) tape.backward(scale(tape, loss, weight));
      }
      adam.step();
      ++result.steps;
      if (options.max_steps != 0 && result.steps >= options.max_steps) break;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(train_split.size());
    rec.dev = evaluate(model, dev_split, options.eval_threads).report;
    if (options.log) {
      *options.log << "epoch " << epoch << " loss " << rec.train_loss << " dev micro-F1 "
                   << rec.dev.micro_f1 << " macro-F1 " << rec.dev.macro_f1 << '\n';
    }
    if (rec.dev.micro_f1 > result.best_dev_micro_f1) {
      result.best_dev_micro_f1 = rec.dev.micro_f1;
      result.best_epoch = epoch;
      best = params.snapshot();
      since_best = 0;
    } else if (++since_best >= options.patience) {
      result.history.push_back(std::move(rec));
      break;
    }
    result.history.push_back(std::move(rec));
    if (options.max_steps != 0 && result.steps >= options.max_steps) break;
  }
  params.restore(best);
  return result;
}

// ---- Pipeline gradient check -------------------------------------------------------

struct ModuleError {
  std::string param;
  double rel_error = 0.0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::map<std::string, ModuleError> worst_per_module;  // encoder / mhlat / decoder
  FiniteDiffReport detail;
};

inline std::string module_of(const std::string& param_name) {
  if (param_name.rfind("encoder.", 0) == 0) return "encoder";
  if (param_name.rfind("head.classifier.", 0) == 0) return "decoder";
  return "mhlat";
}

struct GradcheckOptions {
  std::size_t tokens = 24;
  std::size_t vocab = 16;
  double eps = 1e-5;
  std::uint64_t data_seed = 7;
  std::function<void(ParamStore&)> after_backward;
};

// Random document and label set through the whole pipeline; every trainable
// tensor of the configured tuning mode against central differences.
inline GradcheckReport run_gradcheck(const ModelConfig& config, const GradcheckOptions& opts = {}) {
  if (opts.vocab < 3) throw ConfigError("gradcheck vocabulary must hold at least 3 tokens");
  if (opts.tokens < 1) throw ConfigError("gradcheck needs at least one token");
  Model model = Model::create(config, opts.vocab);
  std::mt19937_64 rng(opts.data_seed);
  std::vector<TokenId> tokens(opts.tokens);
  std::uniform_int_distribution<TokenId> tok(2, static_cast<TokenId>(opts.vocab - 1));
  for (auto& t : tokens) t = tok(rng);
  const ChunkedDocument doc = chunk(tokens, config.L);
  std::vector<std::uint8_t> gold(config.C);
  std::bernoulli_distribution coin(0.4);
  for (auto& g : gold) g = coin(rng) ? 1 : 0;
  gold[0] = 1;

  const auto names = partition_for_mode(model.params(), config.tuning_mode);
  GradcheckReport report;
  report.detail = finite_diff_check(
      model.params(), names, [&](Tape& tape) { return model.loss(tape, doc, gold); }, opts.eps,
      opts.after_backward);
  report.max_rel_error = report.detail.max_rel_error;
  for (const auto& [name, err] : report.detail.per_param) {
    auto& slot = report.worst_per_module[module_of(name)];
    if (slot.param.empty() || err > slot.rel_error) slot = {name, err};
  }
  return report;
}

}  // namespace mhlat
