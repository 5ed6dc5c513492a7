#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhlat/chunking.hpp"
#include "mhlat/decoder.hpp"
#include "mhlat/encoder.hpp"
#include "mhlat/multi_hop.hpp"
#include "mhlat/param_store.hpp"

namespace mhlat {

// Every hyperparameter of a run. JSON keys are the field names verbatim.
struct ModelConfig {
  std::size_t L = 64;       // chunk length
  std::size_t d_m = 32;     // model width
  std::size_t B = 1;        // encoder blocks
  std::size_t C = 0;        // label count; 0 = take it from the training label space
  std::size_t N = 2;        // hops
  bool share_hops = false;
  TuningMode tuning_mode = TuningMode::bitfit;
  double threshold = 0.5;
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 13;

  void validate() const {
    if (L < 1) throw ConfigError("L must be at least 1");
    if (d_m < 1) throw ConfigError("d_m must be at least 1");
    if (B < 1) throw ConfigError("B must be at least 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"L", c.L},
          {"d_m", c.d_m},
          {"B", c.B},
          {"C", c.C},
          {"N", c.N},
          {"share_hops", c.share_hops},
          {"tuning_mode", std::string(to_string(c.tuning_mode))},
          {"threshold", c.threshold},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig c;
  auto count = [](const nlohmann::json& v, const std::string& key) -> std::size_t {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer() && v.get<long long>() >= 0) return v.get<std::size_t>();
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  };
  auto real = [](const nlohmann::json& v, const std::string& key) -> double {
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "L") c.L = count(v, key);
    else if (key == "d_m") c.d_m = count(v, key);
    else if (key == "B") c.B = count(v, key);
    else if (key == "C") c.C = count(v, key);
    else if (key == "N") c.N = count(v, key);
    else if (key == "share_hops") {
      if (!v.is_boolean()) throw ConfigError("config key 'share_hops' must be a boolean");
      c.share_hops = v.get<bool>();
    } else if (key == "tuning_mode") {
      if (!v.is_string()) throw ConfigError("config key 'tuning_mode' must be a string");
      c.tuning_mode = parse_tuning_mode(v.get<std::string>());
    } else if (key == "threshold") c.threshold = real(v, key);
    else if (key == "lr") c.lr = real(v, key);
    else if (key == "epochs") c.epochs = count(v, key);
    else if (key == "batch_size") c.batch_size = count(v, key);
    else if (key == "seed") c.seed = count(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

// Chunking → shared encoder → multi-hop label attention → label-specific
// classifiers. Owns the ParamStore; move-only because its tensors are handles.
class Model {
 public:
  static Model create(const ModelConfig& config, std::size_t vocab_size) {
    config.validate();
    if (config.C < 1) throw ConfigError("model needs C >= 1 labels");
    Model m;
    m.config_ = config;
    Rng rng(config.seed);
    m.encoder_ = Encoder::create(m.params_, {vocab_size, config.L, config.d_m, config.B}, rng);
    m.label_embedding_ = m.params_.add("head.label_embedding", xavier_uniform(config.C, config.d_m, rng),
                                       ParamKind::weight, ParamScope::head);
    if (config.N > 0) {
      if (config.share_hops) {
        m.hops_.push_back(HopParams::create(m.params_, "head.hop_shared", config.d_m, rng));
      } else {
        for (std::size_t l = 0; l < config.N; ++l)
          m.hops_.push_back(
              HopParams::create(m.params_, "head.hop" + std::to_string(l), config.d_m, rng));
      }
    }
    m.classifier_ = ClassifierParams::create(m.params_, config.C, config.d_m, rng);
    return m;
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  const Tensor& label_embedding() const noexcept { return label_embedding_; }
  const std::vector<HopParams>& hops() const noexcept { return hops_; }
  const ClassifierParams& classifier() const noexcept { return classifier_; }

  Tensor encode(Tape& tape, const ChunkedDocument& doc) const {
    return encoder_.encode_document(tape, doc);
  }

  // C×1 logits for one document.
  // With N = 0 the label embedding never meets the document, so the encoder
  // pass is skipped.
  Tensor forward(Tape& tape, const ChunkedDocument& doc) const {
    if (config_.N == 0) return score_labels(tape, label_embedding_, classifier_);
    Tensor context = encode(tape, doc);
    Tensor labels = multi_hop(tape, context, label_embedding_, hops_, config_.N);
    return score_labels(tape, labels, classifier_);
  }

  Tensor loss(Tape& tape, const ChunkedDocument& doc, std::span<const std::uint8_t> gold) const {
    return bce_loss(tape, forward(tape, doc), gold);
  }

  // C×n attention of the last hop (undefined tensor when N = 0).
  Tensor final_attention(Tape& tape, const ChunkedDocument& doc) const {
    return final_hop_alpha(tape, encode(tape, doc), label_embedding_, hops_, config_.N);
  }

 private:
  Model() = default;

  ModelConfig config_;
  ParamStore params_;
  Encoder encoder_;
  Tensor label_embedding_;
  std::vector<HopParams> hops_;
  ClassifierParams classifier_;
};

}  // namespace mhlat
