#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mhlat/autodiff.hpp"

namespace mhlat {

enum class ParamKind : std::uint8_t { weight = 0, bias = 1 };
enum class ParamScope : std::uint8_t { encoder = 0, head = 1 };

// Checkpoint tag byte: bit 0 = bias, bit 1 = head.
inline std::uint8_t encode_tag(ParamKind kind, ParamScope scope) {
  return static_cast<std::uint8_t>(static_cast<std::uint8_t>(kind) |
                                   (static_cast<std::uint8_t>(scope) << 1));
}

inline std::pair<ParamKind, ParamScope> decode_tag(std::uint8_t tag) {
  if (tag > 3) throw DataError(detail::concat("invalid parameter tag byte ", int{tag}));
  return {static_cast<ParamKind>(tag & 1), static_cast<ParamScope>((tag >> 1) & 1)};
}

struct ParamEntry {
  std::string name;
  Tensor tensor;
  ParamKind kind;
  ParamScope scope;
};

// Snapshot of parameter values by name (used for best-epoch retention).
using ParamValues = std::vector<std::pair<std::string, RealMatrix>>;

// Named trainable tensors in registration order.
class ParamStore {
 public:
  Tensor add(std::string name, RealMatrix value, ParamKind kind, ParamScope scope) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    Tensor t(std::move(value), true);
    entries_.push_back({std::move(name), t, kind, scope});
    return t;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const ParamEntry& entry(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError(detail::concat("unknown parameter: ", name));
    return entries_[it->second];
  }
  Tensor get(std::string_view name) const { return entry(name).tensor; }

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.tensor.value().size();
    return total;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Only the named tensors collect gradients; the rest become constants.
  void set_trainable(const std::set<std::string>& names) {
    for (auto& e : entries_) e.tensor.set_requires_grad(names.contains(e.name));
  }

  ParamValues snapshot() const {
    ParamValues out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.emplace_back(e.name, e.tensor.value());
    return out;
  }

  void restore(const ParamValues& values) {
    for (const auto& [name, value] : values) {
      Tensor t = get(name);
      if (t.rows() != value.rows() || t.cols() != value.cols())
        throw ShapeError(detail::concat("parameter ", name, " expects ", t.shape_str(), ", got ",
                                        value.shape_str()));
      t.mutable_value() = value;
    }
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class TuningMode { bitfit, finetune, freeze };

inline std::string_view to_string(TuningMode mode) {
  switch (mode) {
    case TuningMode::bitfit: return "bitfit";
    case TuningMode::finetune: return "finetune";
    case TuningMode::freeze: return "freeze";
  }
  return "?";
}

inline TuningMode parse_tuning_mode(std::string_view text) {
  if (text == "bitfit") return TuningMode::bitfit;
  if (text == "finetune") return TuningMode::finetune;
  if (text == "freeze") return TuningMode::freeze;
  throw ConfigError(detail::concat("unknown tuning_mode '", text,
                                   "' (expected bitfit, finetune or freeze)"));
}

// The exact set of parameters the optimizer may update under `mode`.
//   bitfit:   encoder biases + every head parameter
//   finetune: everything
//   freeze:   head parameters only
inline std::set<std::string> partition_for_mode(const ParamStore& params, TuningMode mode) {
  std::set<std::string> names;
  for (const auto& e : params.entries()) {
    const bool head = e.scope == ParamScope::head;
    bool take = false;
    switch (mode) {
      case TuningMode::finetune: take = true; break;
      case TuningMode::freeze: take = head; break;
      case TuningMode::bitfit: take = head || e.kind == ParamKind::bias; break;
    }
    if (take) names.insert(e.name);
  }
  return names;
}

using Rng = std::mt19937_64;

inline RealMatrix xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  RealMatrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

}  // namespace mhlat
