#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhlat/chunking.hpp"
#include "mhlat/tensor.hpp"

namespace mhlat {

// Ordered label vocabulary; a label's index is its position.
class LabelSpace {
 public:
  LabelSpace() = default;
  explicit LabelSpace(std::vector<std::string> labels) : labels_(std::move(labels)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (!index_.emplace(labels_[i], i).second)
        throw DataError("duplicate label in label space: " + labels_[i]);
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::string& label(std::size_t i) const { return labels_.at(i); }
  bool contains(const std::string& label) const { return index_.contains(label); }
  std::size_t index_of(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw DataError("label '" + label + "' is not in the label space");
    return it->second;
  }

  friend bool operator==(const LabelSpace& a, const LabelSpace& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Example {
  std::string id;
  std::vector<std::string> tokens;
  std::set<std::string> labels;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  LabelSpace label_space;
};

inline std::vector<std::uint8_t> gold_flags(const Example& ex, const LabelSpace& space) {
  std::vector<std::uint8_t> y(space.size(), 0);
  for (const auto& l : ex.labels) y[space.index_of(l)] = 1;
  return y;
}

inline FlagMatrix gold_matrix(const std::vector<Example>& examples, const LabelSpace& space) {
  FlagMatrix m(examples.size(), space.size());
  for (std::size_t d = 0; d < examples.size(); ++d) {
    const auto y = gold_flags(examples[d], space);
    std::copy(y.begin(), y.end(), m.row(d).begin());
  }
  return m;
}

// Sorted union of labels seen in `examples`.
inline LabelSpace label_space_from(const std::vector<Example>& examples) {
  std::set<std::string> all;
  for (const auto& ex : examples) all.insert(ex.labels.begin(), ex.labels.end());
  return LabelSpace(std::vector<std::string>(all.begin(), all.end()));
}

inline void save_label_space(const std::string& path, const LabelSpace& space) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& l : space.labels()) out << l << '\n';
}

inline LabelSpace load_label_space(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<std::string> labels;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) labels.push_back(line);
  return LabelSpace(std::move(labels));
}

// ---- JSONL ---------------------------------------------------------------

inline nlohmann::ordered_json example_to_json(const Example& ex) {
  return {{"id", ex.id},
          {"tokens", ex.tokens},
          {"labels", std::vector<std::string>(ex.labels.begin(), ex.labels.end())}};
}

inline void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

// Reads {"id", "tokens", "labels"} objects, one per line. With `strict_space`
// every label must already belong to it; otherwise the space is built from
// this file's labels, sorted.
inline Dataset load_jsonl(const std::string& path,
                          const std::optional<LabelSpace>& strict_space = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  Dataset ds;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      return DataError(path + ":" + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("tokens") ||
        !j["tokens"].is_array() || !j.contains("labels") || !j["labels"].is_array())
      throw fail("expected an object with string \"id\" and arrays \"tokens\", \"labels\"");
    Example ex;
    ex.id = j["id"].get<std::string>();
    for (const auto& t : j["tokens"]) {
      if (!t.is_string()) throw fail("non-string token");
      ex.tokens.push_back(t.get<std::string>());
    }
    if (ex.tokens.empty()) throw fail("example '" + ex.id + "' has no tokens");
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) throw fail("non-string label");
      const auto label = l.get<std::string>();
      if (strict_space && !strict_space->contains(label))
        throw fail("label '" + label + "' does not occur in the training label space");
      ex.labels.insert(label);
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw DataError(path + ": no examples");
  ds.label_space = strict_space ? *strict_space : label_space_from(ds.examples);
  return ds;
}

// ---- Vocabulary ------------------------------------------------------------

class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<unk>"} {}

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[kPadId] != "<pad>" || tokens_[kUnknownId] != "<unk>")
      throw DataError("vocabulary must start with the reserved <pad>, <unk> entries");
    for (std::size_t i = 2; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw DataError("duplicate vocabulary token: " + tokens_[i]);
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnknownId : it->second;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Tokens with frequency >= min_freq, ordered by descending count, then
// lexicographically. Pass the training split only.
inline Vocab build_vocab(const std::vector<Example>& train, std::size_t min_freq = 1) {
  if (min_freq < 1) throw ConfigError("min_freq must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& ex : train)
    for (const auto& t : ex.tokens) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_freq && tok != "<pad>" && tok != "<unk>") kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab(std::move(tokens));
}

inline std::vector<TokenId> tokenize(const Example& ex, const Vocab& vocab) {
  std::vector<TokenId> ids;
  ids.reserve(ex.tokens.size());
  for (const auto& t : ex.tokens) ids.push_back(vocab.id(t));
  return ids;
}

// ---- Synthetic corpus ----------------------------------------------------------

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::size_t docs = 500;
  std::size_t labels = 20;
  std::size_t max_len = 256;
  std::size_t planted_len = 4;
  std::size_t noise_vocab = 1000;
  std::size_t min_labels = 1;
  std::size_t max_labels = 4;
  double zipf_exponent = 0.0;  // 0 = uniform label frequencies
};

struct PlantedSpan {
  std::size_t label;
  std::size_t position;

  friend bool operator==(const PlantedSpan&, const PlantedSpan&) = default;
};

struct GeneratedCorpus {
  std::vector<Example> examples;
  LabelSpace label_space;
  std::vector<std::vector<std::string>> signatures;  // planted token sequence per label
  std::vector<std::vector<PlantedSpan>> planted;      // per document
};

namespace detail {

inline std::string numbered(const char* prefix, std::size_t i, std::size_t count) {
  const int width = static_cast<int>(std::to_string(count > 0 ? count - 1 : 0).size());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace detail

// Documents of filler tokens with one planted, label-specific token sequence
// per assigned label. A pure function of the config (including the seed).
inline GeneratedCorpus generate_corpus(const GeneratorConfig& cfg) {
  if (cfg.labels < 2) throw ConfigError("generator needs at least 2 labels");
  if (cfg.planted_len < 1) throw ConfigError("planted_len must be at least 1");
  if (cfg.max_len < 10 * cfg.planted_len)
    throw ConfigError(mhlat::detail::concat("max_len ", cfg.max_len, " must be >= 10 * planted_len (",
                                            10 * cfg.planted_len, ")"));
  if (cfg.docs < 1) throw ConfigError("generator needs at least one document");
  if (cfg.noise_vocab < 1) throw ConfigError("noise vocabulary must be non-empty");
  if (cfg.min_labels < 1 || cfg.min_labels > cfg.max_labels)
    throw ConfigError("label cardinality bounds must satisfy 1 <= min <= max");
  if (cfg.zipf_exponent < 0.0) throw ConfigError("zipf exponent must be non-negative");

  std::mt19937_64 rng(cfg.seed);
  GeneratedCorpus out;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < cfg.labels; ++c) {
    names.push_back(detail::numbered("LBL", c, cfg.labels));
    std::vector<std::string> sig;
    for (std::size_t j = 0; j < cfg.planted_len; ++j)
      sig.push_back(detail::numbered("sig", c, cfg.labels) + "_" + std::to_string(j));
    out.signatures.push_back(std::move(sig));
  }
  out.label_space = LabelSpace(names);

  std::vector<double> weights(cfg.labels);
  for (std::size_t c = 0; c < cfg.labels; ++c)
    weights[c] = 1.0 / std::pow(static_cast<double>(c + 1), cfg.zipf_exponent);

  const std::size_t max_card = std::min(cfg.max_labels, cfg.labels);
  const std::size_t min_card = std::min(cfg.min_labels, max_card);
  std::uniform_int_distribution<std::size_t> card_dist(min_card, max_card);
  std::uniform_int_distribution<std::size_t> noise_dist(0, cfg.noise_vocab - 1);

  for (std::size_t d = 0; d < cfg.docs; ++d) {
    const std::size_t card = card_dist(rng);
    std::vector<double> w = weights;
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < card; ++i) {
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      const std::size_t c = pick(rng);
      chosen.push_back(c);
      w[c] = 0.0;
    }
    const std::size_t planted_total = card * cfg.planted_len;
    const std::size_t lo = std::max(cfg.max_len / 4, planted_total);
    const std::size_t n = std::uniform_int_distribution<std::size_t>(lo, cfg.max_len)(rng);
    const std::size_t filler = n - planted_total;

    // Insertion slots among the filler tokens, one per planted sequence.
    std::vector<std::size_t> slots;
    std::uniform_int_distribution<std::size_t> slot_dist(0, filler);
    for (std::size_t i = 0; i < card; ++i) slots.push_back(slot_dist(rng));
    std::sort(slots.begin(), slots.end());

    Example ex;
    ex.id = detail::numbered("doc", d, cfg.docs);
    std::vector<PlantedSpan> spans;
    std::size_t next = 0;
    for (std::size_t f = 0; f <= filler; ++f) {
      while (next < card && slots[next] == f) {
        spans.push_back({chosen[next], ex.tokens.size()});
        for (const auto& tok : out.signatures[chosen[next]]) ex.tokens.push_back(tok);
        ++next;
      }
      if (f < filler) ex.tokens.push_back(detail::numbered("w", noise_dist(rng), cfg.noise_vocab));
    }
    for (std::size_t c : chosen) ex.labels.insert(names[c]);
    out.examples.push_back(std::move(ex));
    out.planted.push_back(std::move(spans));
  }
  return out;
}

// Leading (1 − dev_fraction) share for training, the rest for dev.
inline std::pair<std::vector<Example>, std::vector<Example>> split_examples(
    const std::vector<Example>& all, double dev_fraction) {
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0))
    throw ConfigError("dev fraction must lie in (0, 1)");
  if (all.size() < 2) throw ConfigError("need at least two examples to split");
  auto dev_count = static_cast<std::size_t>(static_cast<double>(all.size()) * dev_fraction + 0.5);
  dev_count = std::clamp<std::size_t>(dev_count, 1, all.size() - 1);
  const auto cut = all.begin() + static_cast<std::ptrdiff_t>(all.size() - dev_count);
  return {std::vector<Example>(all.begin(), cut), std::vector<Example>(cut, all.end())};
}

}  // namespace mhlat
