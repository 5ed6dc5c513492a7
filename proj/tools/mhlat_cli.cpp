// Command-line front end: corpus generation, training, evaluation and the
// pipeline gradient check.
//
// Exit codes: 0 success, 1 usage/config/data error, 2 numerical-check failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mhlat/mhlat.hpp"

namespace fs = std::filesystem;
using namespace mhlat;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr double kGradTolerance = 1e-3;

struct GenerateArgs {
  std::uint64_t seed = 0;
  std::size_t docs = 500;
  std::size_t labels = 20;
  std::size_t max_len = 256;
  std::size_t planted_len = 4;
  double dev_fraction = 0.2;
  double zipf = 0.0;
  std::string out;
};

struct TrainArgs {
  std::string config, train, dev, out;
  std::size_t threads = 1;
  bool quiet = false;
};

struct EvalArgs {
  std::string ckpt, data, report, predictions, attention;
  std::size_t top = 5;
  std::size_t threads = 1;
};

struct GradcheckArgs {
  std::string config;
  std::size_t tokens = 24;
  std::size_t vocab = 16;
  double eps = 1e-5;
  bool inject_fault = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

int run_generate(const GenerateArgs& a) {
  GeneratorConfig g;
  g.seed = a.seed;
  g.docs = a.docs;
  g.labels = a.labels;
  g.max_len = a.max_len;
  g.planted_len = a.planted_len;
  g.zipf_exponent = a.zipf;
  const GeneratedCorpus corpus = generate_corpus(g);
  const auto [train, dev] = split_examples(corpus.examples, a.dev_fraction);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  save_jsonl((dir / "train.jsonl").string(), train);
  save_jsonl((dir / "dev.jsonl").string(), dev);
  save_label_space((dir / "labels.txt").string(), corpus.label_space);
  std::cout << "wrote " << train.size() << " train and " << dev.size() << " dev documents, "
            << corpus.label_space.size() << " labels, to " << dir.string() << '\n';
  return kExitOk;
}

int run_train(const TrainArgs& a) {
  ModelConfig config = load_config(a.config);
  const Dataset train_set = load_jsonl(a.train);
  const Dataset dev_set = load_jsonl(a.dev, train_set.label_space);
  const LabelSpace& labels = train_set.label_space;
  if (config.C == 0) {
    config.C = labels.size();
  } else if (config.C != labels.size()) {
    throw ConfigError(detail::concat("config C=", config.C, " but the training split has C=",
                                     labels.size(), " labels"));
  }
  const Vocab vocab = build_vocab(train_set.examples);
  const PreparedSplit train_split = prepare(train_set.examples, vocab, labels, config.L);
  const PreparedSplit dev_split = prepare(dev_set.examples, vocab, labels, config.L);

  Model model = Model::create(config, vocab.size());
  TrainOptions opts;
  opts.eval_threads = a.threads;
  if (!a.quiet) opts.log = &std::cout;
  const TrainResult result = train(model, train_split, dev_split, opts);

  checkpoint::save_model(a.out, model, labels, vocab);
  nlohmann::ordered_json history = nlohmann::ordered_json::array();
  for (const auto& rec : result.history) {
    nlohmann::ordered_json row;
    row["epoch"] = rec.epoch;
    row["train_loss"] = rec.train_loss;
    row["dev"] = metrics::to_json(rec.dev);
    history.push_back(std::move(row));
  }
  nlohmann::ordered_json summary;
  summary["best_epoch"] = result.best_epoch;
  summary["best_dev_micro_f1"] = result.best_dev_micro_f1;
  summary["steps"] = result.steps;
  summary["epochs"] = std::move(history);
  write_text(a.out + ".history.json", summary.dump(2) + "\n");
  std::cout << "best dev micro-F1 " << result.best_dev_micro_f1 << " at epoch " << result.best_epoch
            << "; checkpoint " << a.out << '\n';
  return kExitOk;
}

int run_eval(const EvalArgs& a) {
  checkpoint::LoadedModel loaded = checkpoint::load_model(a.ckpt);
  const Dataset data = load_jsonl(a.data, loaded.labels);
  const PreparedSplit split = prepare(data.examples, loaded.vocab, loaded.labels, loaded.model.config().L);
  const EvalResult result = evaluate(loaded.model, split, a.threads);
  write_text(a.report, metrics::to_json(result.report).dump(2) + "\n");
  if (!a.predictions.empty()) write_predictions(a.predictions, split, result, loaded.labels);
  if (!a.attention.empty()) write_attention(a.attention, loaded.model, split, loaded.labels, a.top);
  std::cout << metrics::to_text(result.report);
  return kExitOk;
}

int run_gradcheck_cmd(const GradcheckArgs& a) {
  ModelConfig config = load_config(a.config);
  if (config.C == 0) config.C = 5;
  if (a.tokens > 32 || config.C > 6 || config.d_m > 8)
    throw ConfigError(detail::concat("gradcheck is for small configs (n <= 32, C <= 6, d_m <= 8); got n=",
                                     a.tokens, ", C=", config.C, ", d_m=", config.d_m));
  GradcheckOptions opts;
  opts.tokens = a.tokens;
  opts.vocab = a.vocab;
  opts.eps = a.eps;
  if (a.inject_fault) {
    opts.after_backward = [](ParamStore& p) { p.get("head.classifier.bias").mutable_grad()[0] += 0.05; };
  }
  const GradcheckReport rep = run_gradcheck(config, opts);
  std::printf("%-8s %-36s %s\n", "module", "worst parameter", "max rel error");
  for (const auto& [module, worst] : rep.worst_per_module)
    std::printf("%-8s %-36s %.3e\n", module.c_str(), worst.param.c_str(), worst.rel_error);
  std::printf("overall max relative error %.3e (%s[%zu]); tolerance %.0e\n", rep.max_rel_error,
              rep.detail.worst_param.c_str(), rep.detail.worst_index, kGradTolerance);
  if (rep.max_rel_error >= kGradTolerance) {
    std::printf("FAIL: gradient check exceeded tolerance\n");
    return kExitNumeric;
  }
  std::printf("OK\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-hop label-wise attention for long-document multi-label classification"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic planted-signal corpus");
  generate->add_option("--seed", gen.seed, "RNG seed")->required();
  generate->add_option("--docs", gen.docs, "Number of documents")->capture_default_str();
  generate->add_option("--labels", gen.labels, "Number of labels")->capture_default_str();
  generate->add_option("--max-len", gen.max_len, "Maximum tokens per document")->capture_default_str();
  generate->add_option("--out", gen.out, "Output directory (train.jsonl, dev.jsonl, labels.txt)")->required();
  generate->add_option("--planted-len", gen.planted_len, "Length of each planted label sequence")
      ->capture_default_str();
  generate->add_option("--dev-fraction", gen.dev_fraction, "Share of documents held out as dev")
      ->capture_default_str();
  generate->add_option("--zipf", gen.zipf, "Zipf exponent of label frequencies (0 = uniform)")
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--config", tr.config, "JSON model config")->required();
  train_cmd->add_option("--train", tr.train, "Training JSONL")->required();
  train_cmd->add_option("--dev", tr.dev, "Dev JSONL")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--threads", tr.threads, "Evaluation worker threads")->capture_default_str();
  train_cmd->add_flag("--quiet", tr.quiet, "Suppress per-epoch log lines");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a JSONL split");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", ev.data, "JSONL split to evaluate")->required();
  eval_cmd->add_option("--report", ev.report, "Where to write the JSON metrics report")->required();
  eval_cmd->add_option("--predictions", ev.predictions, "Optional prediction JSONL dump");
  eval_cmd->add_option("--attention", ev.attention, "Optional final-hop attention CSV dump");
  eval_cmd->add_option("--top", ev.top, "Positions per label in the attention dump")->capture_default_str();
  eval_cmd->add_option("--threads", ev.threads, "Evaluation worker threads")->capture_default_str();

  GradcheckArgs gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full pipeline");
  grad_cmd->add_option("--config", gc.config, "JSON model config")->required();
  grad_cmd->add_option("--tokens", gc.tokens, "Document length n")->capture_default_str();
  grad_cmd->add_option("--vocab", gc.vocab, "Vocabulary size")->capture_default_str();
  grad_cmd->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str();
  grad_cmd->add_flag("--inject-grad-fault", gc.inject_fault,
                     "Corrupt one analytic gradient entry (detector self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (generate->parsed()) return run_generate(gen);
    if (train_cmd->parsed()) return run_train(tr);
    if (eval_cmd->parsed()) return run_eval(ev);
    if (grad_cmd->parsed()) return run_gradcheck_cmd(gc);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
