#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"

using namespace mhlat;
using testing_support::max_abs_diff;
using testing_support::max_rel_error;
using testing_support::random_matrix;

namespace {

struct Fixture {
  ParamStore params;
  Encoder encoder;
};

Fixture make_encoder(std::size_t V, std::size_t L, std::size_t d, std::size_t B, std::uint64_t seed) {
  Fixture f;
  Rng rng(seed);
  f.encoder = Encoder::create(f.params, {V, L, d, B}, rng);
  return f;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t V, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> tok(2, static_cast<TokenId>(V - 1));
  std::vector<TokenId> t(n);
  for (auto& x : t) x = tok(rng);
  return t;
}

}  // namespace

TEST(EncodeChunk, OutputShapeIsLByWidth) {
  auto f = make_encoder(30, 8, 6, 2, 1);
  std::mt19937_64 rng(1);
  const auto doc = chunk(random_tokens(5, 30, rng), 8);
  Tape tape = Tape::inference();
  const Tensor out = f.encoder.encode_chunk(tape, doc.chunks[0], doc.mask[0]);
  EXPECT_EQ(out.rows(), 8u);
  EXPECT_EQ(out.cols(), 6u);
}

TEST(EncodeChunk, IdenticalChunksGiveIdenticalOutputs) {
  auto f = make_encoder(30, 6, 4, 1, 2);
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(6, 30, rng);
  std::vector<TokenId> doubled = tokens;
  doubled.insert(doubled.end(), tokens.begin(), tokens.end());
  const auto doc = chunk(doubled, 6);
  Tape tape = Tape::inference();
  const Tensor a = f.encoder.encode_chunk(tape, doc.chunks[0], doc.mask[0]);
  const Tensor b = f.encoder.encode_chunk(tape, doc.chunks[1], doc.mask[1]);
  EXPECT_EQ(a.value(), b.value());
}

TEST(EncodeChunk, SwappingTwoTokensChangesOutput) {
  auto f = make_encoder(30, 6, 4, 1, 3);
  std::vector<TokenId> tokens{5, 9, 11, 4, 7, 20};
  std::vector<TokenId> swapped = tokens;
  std::swap(swapped[1], swapped[4]);
  const auto d1 = chunk(tokens, 6), d2 = chunk(swapped, 6);
  Tape tape = Tape::inference();
  const RealMatrix a = f.encoder.encode_chunk(tape, d1.chunks[0], d1.mask[0]).value();
  const RealMatrix b = f.encoder.encode_chunk(tape, d2.chunks[0], d2.mask[0]).value();
  // Row 1 of a and row 4 of b see the same token at different positions.
  double diff = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) diff += std::abs(a(1, c) - b(4, c));
  EXPECT_GT(diff, 1e-6);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST(EncodeChunk, OutOfVocabularyIdNamesIdAndPosition) {
  auto f = make_encoder(10, 4, 4, 1, 4);
  const std::vector<TokenId> chunk_ids{2, 3, 42, 4};
  const std::vector<std::uint8_t> mask(4, 1);
  Tape tape = Tape::inference();
  try {
    f.encoder.encode_chunk(tape, chunk_ids, mask);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("42"), std::string::npos) << msg;
    EXPECT_NE(msg.find("position 2"), std::string::npos) << msg;
  }
}

TEST(EncodeDocument, SingleChunkEqualsEncodeChunkWithoutPadRows) {
  auto f = make_encoder(30, 8, 4, 2, 5);
  std::mt19937_64 rng(5);
  const auto doc = chunk(random_tokens(5, 30, rng), 8);
  Tape tape = Tape::inference();
  const RealMatrix whole = f.encoder.encode_document(tape, doc).value();
  const RealMatrix single = f.encoder.encode_chunk(tape, doc.chunks[0], doc.mask[0]).value();
  ASSERT_EQ(whole.rows(), 5u);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(whole(r, c), single(r, c));
}

TEST(EncodeDocument, LongDocumentShape) {
  auto f = make_encoder(64, 512, 16, 1, 6);
  std::mt19937_64 rng(6);
  const auto doc = chunk(random_tokens(1100, 64, rng), 512);
  Tape tape = Tape::inference();
  const Tensor out = f.encoder.encode_document(tape, doc);
  EXPECT_EQ(out.rows(), 1100u);
  EXPECT_EQ(out.cols(), 16u);
}

TEST(EncodeDocument, PadIdsNeverLeakIntoOutput) {
  auto f = make_encoder(30, 8, 4, 2, 7);
  std::mt19937_64 rng(7);
  auto doc = chunk(random_tokens(13, 30, rng), 8);
  Tape tape = Tape::inference();
  const RealMatrix before = f.encoder.encode_document(tape, doc).value();
  for (std::size_t j = 0; j < 8; ++j)
    if (!doc.mask.back()[j]) doc.chunks.back()[j] = static_cast<TokenId>(2 + j);
  const RealMatrix after = f.encoder.encode_document(tape, doc).value();
  EXPECT_EQ(before, after);
}

TEST(EncodeDocument, SharedParametersAccumulateGradientsOverChunks) {
  // The gradient of the whole-document loss must equal the sum over chunks of
  // each chunk's own loss gradient, here taken by central differences.
  auto f = make_encoder(20, 4, 4, 1, 8);
  std::mt19937_64 rng(8);
  const auto doc = chunk(random_tokens(10, 20, rng), 4);
  const RealMatrix weights = random_matrix(10, 4, rng);
  const std::vector<std::string> checked{"encoder.token_embedding", "encoder.position_embedding",
                                         "encoder.block0.attn.wq", "encoder.block0.attn.bv",
                                         "encoder.block0.ff1.w", "encoder.block0.ln2.bias"};
  const std::set<std::string> names(checked.begin(), checked.end());
  f.params.set_trainable(names);
  f.params.zero_grad();
  {
    Tape tape;
    Tensor out = f.encoder.encode_document(tape, doc);
    tape.backward(sum(tape, mul(tape, out, Tensor(weights))));
  }

  auto chunk_loss = [&](std::size_t c) {
    Tape tape = Tape::inference();
    const RealMatrix feat = f.encoder.encode_chunk(tape, doc.chunks[c], doc.mask[c]).value();
    double acc = 0.0;
    for (std::size_t j = 0; j < doc.chunk_len; ++j) {
      if (!doc.mask[c][j]) continue;
      for (std::size_t col = 0; col < feat.cols(); ++col)
        acc += feat(j, col) * weights(c * doc.chunk_len + j, col);
    }
    return acc;
  };
  const double eps = 1e-6;
  for (const auto& name : checked) {
    Tensor t = f.params.get(name);
    RealMatrix summed(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.value().size(); ++i) {
      const double orig = t.value()[i];
      for (std::size_t c = 0; c < doc.k(); ++c) {
        t.mutable_value()[i] = orig + eps;
        const double up = chunk_loss(c);
        t.mutable_value()[i] = orig - eps;
        const double down = chunk_loss(c);
        t.mutable_value()[i] = orig;
        summed[i] += (up - down) / (2 * eps);
      }
    }
    EXPECT_LT(max_rel_error(t.grad(), summed), 1e-5) << name;
  }
}

TEST(Partition, FreezeNeverContainsEncoderNames) {
  auto f = make_encoder(20, 4, 4, 2, 9);
  Rng rng(9);
  f.params.add("head.thing", xavier_uniform(2, 4, rng), ParamKind::weight, ParamScope::head);
  for (const auto& name : partition_for_mode(f.params, TuningMode::freeze))
    EXPECT_NE(name.rfind("encoder.", 0), 0u) << name;
  EXPECT_EQ(partition_for_mode(f.params, TuningMode::freeze), std::set<std::string>{"head.thing"});
}

TEST(Partition, BitfitIsStrictSubsetOfFinetune) {
  auto f = make_encoder(20, 4, 4, 1, 10);
  const auto bitfit = partition_for_mode(f.params, TuningMode::bitfit);
  const auto finetune = partition_for_mode(f.params, TuningMode::finetune);
  EXPECT_TRUE(std::includes(finetune.begin(), finetune.end(), bitfit.begin(), bitfit.end()));
  EXPECT_LT(bitfit.size(), finetune.size());
  EXPECT_EQ(finetune.size(), f.params.size());
}

TEST(Partition, BitfitScalarCountMatchesHandCountOfBiasVectors) {
  const std::size_t d = 16;
  auto f = make_encoder(50, 8, d, 2, 11);
  std::size_t trainable_scalars = 0;
  for (const auto& name : partition_for_mode(f.params, TuningMode::bitfit))
    trainable_scalars += f.params.get(name).value().size();
  // Per block: query, value and output projection biases, two layer-norm
  // shifts and the second feed-forward bias (d each) plus the first
  // feed-forward bias (4d).
  const std::size_t per_block = 6 * d + 4 * d;
  EXPECT_EQ(trainable_scalars, 2 * per_block);
  EXPECT_EQ(trainable_scalars, 320u);
}

TEST(Partition, UnknownModeIsAConfigError) {
  EXPECT_THROW(parse_tuning_mode("partial"), ConfigError);
  EXPECT_EQ(parse_tuning_mode("bitfit"), TuningMode::bitfit);
  EXPECT_EQ(parse_tuning_mode("finetune"), TuningMode::finetune);
  EXPECT_EQ(parse_tuning_mode("freeze"), TuningMode::freeze);
}

TEST(Partition, BitfitStepsNeverTouchEncoderWeights) {
  auto f = make_encoder(20, 4, 4, 1, 12);
  std::mt19937_64 rng(12);
  const auto doc = chunk(random_tokens(7, 20, rng), 4);
  const RealMatrix weights = random_matrix(7, 4, rng);
  const ParamValues init = f.params.snapshot();
  const auto trainable = partition_for_mode(f.params, TuningMode::bitfit);
  f.params.set_trainable(trainable);
  Adam adam(f.params, trainable, {1e-2});
  for (int step = 0; step < 5; ++step) {
    f.params.zero_grad();
    Tape tape;
    tape.backward(sum(tape, mul(tape, f.encoder.encode_document(tape, doc), Tensor(weights))));
    adam.step();
  }
  bool some_bias_moved = false;
  for (std::size_t i = 0; i < init.size(); ++i) {
    const auto& e = f.params.entry(init[i].first);
    if (e.kind == ParamKind::weight)
      EXPECT_EQ(e.tensor.value(), init[i].second) << e.name;
    else if (e.tensor.value() != init[i].second)
      some_bias_moved = true;
  }
  EXPECT_TRUE(some_bias_moved);
}
