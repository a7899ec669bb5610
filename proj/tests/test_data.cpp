// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "msc/data.hpp"

using namespace msc;

TEST(Vocab, ReservedIdsComeFirst) {
  Vocab v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.id("<pad>"), kPadId);
  EXPECT_EQ(v.id("<bos>"), kBosId);
  EXPECT_EQ(v.id("<eos>"), kEosId);
  EXPECT_EQ(v.id("<unk>"), kUnkId);
}

TEST(Vocab, ExtraTokensAreDense) {
  Vocab v = Vocab::build({"a", "b"});
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  EXPECT_EQ(v.id("zzz"), kUnkId);
  EXPECT_THROW(v.strict_id("zzz"), ContractViolation);
  EXPECT_THROW(Vocab::build({"a", "a"}), ContractViolation);
}

TEST(Vocab, EncodeDecodeRoundTrip) {
  Vocab v = Vocab::build({"the", "cat", "sat"});
  std::vector<std::string> words{"cat", "sat", "the", "cat"};
  EXPECT_EQ(v.decode(v.encode(words)), words);
  EXPECT_THROW(v.token(99), IndexError);
}

TEST(Vocab, ToyAndCorpusOrderAgree) {
  Vocab toy = Vocab::toy(14);
  EXPECT_EQ(toy.id("w4"), 4);
  EXPECT_EQ(toy.id("w13"), 13);
  Vocab corpus = Vocab::from_corpus({{{"w13", "w5"}, {"w4"}}, {{"w9"}, {"w10", "w11", "w12", "w6", "w7", "w8"}}});
  EXPECT_EQ(corpus.tokens(), toy.tokens());
}

TEST(Task, CopyReverseSortTargets) {
  TokenIds s{5, 7, 9, 6};
  EXPECT_EQ(task_target(TaskKind::copy, s, {}), s);
  EXPECT_EQ(task_target(TaskKind::reverse, s, {}), (TokenIds{6, 9, 7, 5}));
  EXPECT_EQ(task_target(TaskKind::sort, s, {}), (TokenIds{5, 6, 7, 9}));
}

TEST(Task, SubstitutionAppliesMappingThenSwapsPairs) {
  TokenIds mapping(16);
  for (std::size_t i = 0; i < mapping.size(); ++i) mapping[i] = static_cast<std::int32_t>(i);
  mapping[5] = 12;
  mapping[7] = 13;
  mapping[9] = 14;
  EXPECT_EQ(substitute_and_swap({5, 7, 9}, mapping), (TokenIds{13, 12, 14}));
  EXPECT_EQ(substitute_and_swap({5}, mapping), (TokenIds{12}));
  EXPECT_EQ(substitute_and_swap({5, 7, 9, 5}, mapping), (TokenIds{13, 12, 12, 14}));
}

TEST(Task, SubstitutionMappingIsABijectionOverContent) {
  auto m = substitution_mapping(20, 3);
  TokenIds sorted(m.begin() + 4, m.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], static_cast<std::int32_t>(i + 4));
  for (std::int32_t i = 0; i < 4; ++i) EXPECT_EQ(m[static_cast<std::size_t>(i)], i);
}

TEST(Task, GenerationIsDeterministicAndHeldOutIsDisjoint) {
  TaskSpec spec;
  spec.kind = TaskKind::substitution_translation;
  spec.vocab_size = 12;
  spec.min_len = 2;
  spec.max_len = 6;
  spec.train_size = 300;
  spec.valid_size = 40;
  spec.test_size = 40;
  spec.seed = 9;
  auto a = generate_task(spec), b = generate_task(spec);
  ASSERT_EQ(a.train.size(), 300u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].src, b.train[i].src);
    EXPECT_EQ(a.train[i].tgt, b.train[i].tgt);
  }
  std::set<TokenIds> train;
  for (const auto& p : a.train) train.insert(p.src);
  for (const auto* split : {&a.valid, &a.test})
    for (const auto& p : *split) {
      EXPECT_EQ(train.count(p.src), 0u);
      EXPECT_GE(p.src.size(), 2u);
      EXPECT_LE(p.src.size(), 6u);
      for (auto id : p.src) EXPECT_GE(id, 4);
    }
}

TEST(Task, RejectsTinyVocabAndBadLengths) {
  TaskSpec spec;
  spec.vocab_size = 5;
  EXPECT_THROW(generate_task(spec), ConfigError);
  spec.vocab_size = 10;
  spec.min_len = 0;
  EXPECT_THROW(generate_task(spec), ConfigError);
}

namespace {

std::vector<Pair> pairs_of_lengths(const std::vector<std::size_t>& lens) {
  std::vector<Pair> out;
  for (std::size_t n : lens) out.push_back({TokenIds(n, 5), TokenIds(n, 6)});
  return out;
}

}  // namespace

TEST(Batching, EqualLengthsFillTheBudget) {
  auto batches = batch_by_tokens(pairs_of_lengths(std::vector<std::size_t>(12, 4)), 16, 1);
  ASSERT_EQ(batches.size(), 3u);
  for (const auto& b : batches) EXPECT_EQ(b.src.batch, 4u);
}

TEST(Batching, SingleSequenceIsOneBatch) {
  auto batches = batch_by_tokens(pairs_of_lengths({3}), 16, 1);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0].src.batch, 1u);
}

TEST(Batching, MixedLengthsRespectBudgetAndCoverEverything) {
  std::vector<std::size_t> lens;
  for (std::size_t i = 0; i < 50; ++i) lens.push_back(3 + i % 8);
  auto data = pairs_of_lengths(lens);
  auto batches = batch_by_tokens(data, 20, 2);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t mx = 0;
    for (std::size_t r : b.rows) mx = std::max(mx, pair_length(data[r]));
    EXPECT_LE(b.rows.size() * mx, 20u);
    seen.insert(seen.end(), b.rows.begin(), b.rows.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(seen.size(), 50u);
}

TEST(Batching, OverlongSequenceIsRejected) {
  EXPECT_THROW(batch_by_tokens(pairs_of_lengths({3, 30}), 16, 1), ContractViolation);
}

TEST(Batching, TargetInputAndOutputAreShiftedByOne) {
  std::vector<Pair> data{{{4, 5, 6}, {7, 8}}, {{4}, {9, 10, 11, 12}}, {{5, 5}, {4}}};
  auto batches = batch_by_tokens(data, 64, 3);
  for (const auto& b : batches) {
    for (std::size_t i = 0; i < b.tgt_in.batch; ++i) {
      EXPECT_EQ(b.tgt_in.at(i, 0), kBosId);
      for (std::size_t j = 0; j + 1 < b.tgt_in.length; ++j) {
        if (b.tgt_out.at(i, j) != kPadId && b.tgt_in.at(i, j + 1) != kPadId) {
          EXPECT_EQ(b.tgt_out.at(i, j), b.tgt_in.at(i, j + 1));
        }
      }
      const auto& tgt = data[b.rows[i]].tgt;
      EXPECT_EQ(b.tgt_out.at(i, tgt.size()), kEosId);
    }
  }
}

TEST(Batching, OrderDependsOnSeedOnly) {
  std::vector<std::size_t> lens;
  for (std::size_t i = 0; i < 40; ++i) lens.push_back(1 + i % 9);
  auto data = pairs_of_lengths(lens);
  auto a = batch_by_tokens(data, 12, 5), b = batch_by_tokens(data, 12, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].rows, b[i].rows);
}

TEST(Files, TsvRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "msc_data_roundtrip.tsv").string();
  Vocab v = Vocab::toy(10);
  std::vector<Pair> data{{{4, 5}, {6}}, {{9, 8, 7}, {4, 4}}};
  write_tsv(path, data, v);
  auto text = read_tsv(path);
  auto back = encode_pairs(text, v);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].src, data[1].src);
  EXPECT_EQ(back[1].tgt, data[1].tgt);
  std::filesystem::remove(path);
  EXPECT_THROW(read_tsv(path), IoError);
}
