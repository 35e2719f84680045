#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "difflab/corpus.hpp"
#include "difflab/diffusion.hpp"
#include "difflab/rng.hpp"
#include "support/fakes.hpp"

using namespace difflab;

namespace fs = std::filesystem;

namespace {

std::vector<std::int32_t> iota_ids(std::size_t n) {
  std::vector<std::int32_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int32_t>(i % 256);
  return ids;
}

void write_file(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << content;
}

}  // namespace

TEST(Tokenizer, BytesMapToIds) {
  EXPECT_EQ(encode("ab"), (std::vector<std::int32_t>{97, 98}));
  EXPECT_EQ(encode(std::string("\x00\xff", 2)), (std::vector<std::int32_t>{0, 255}));
  EXPECT_TRUE(encode("").empty());
}

TEST(Tokenizer, RandomBytesRoundTrip) {
  RngStream rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::string bytes(1024, '\0');
    for (char& c : bytes) c = static_cast<char>(rng.next_u64() & 0xff);
    const auto ids = encode(bytes);
    for (auto id : ids) {
      EXPECT_GE(id, 0);
      EXPECT_LT(id, 256);
    }
    EXPECT_EQ(decode(ids), bytes);
    EXPECT_EQ(encode(decode(ids)), ids);
  }
}

TEST(Tokenizer, PadAndMaskHandling) {
  const std::vector<std::int32_t> padded{104, 105, ByteVocab::kPad};
  EXPECT_EQ(decode(padded, true), "hi");
  EXPECT_THROW(decode(padded), DomainError);
  const std::vector<std::int32_t> masked{104, ByteVocab::kMask, 105};
  EXPECT_THROW(decode(masked), DomainError);
  EXPECT_EQ(decode(masked, true), "hi");
  const std::vector<std::int32_t> junk{300};
  EXPECT_THROW(decode(junk, true), DomainError);
  EXPECT_EQ(ByteVocab::kSize, 258u);
  EXPECT_EQ(ByteVocab::kMask, static_cast<std::int32_t>(ByteVocab::kModelVocab));
}

TEST(Pack, CeilingDivisionWithPaddedTail) {
  const auto ids = iota_ids(1000);
  const PackedSplit s = pack(ids, 128, 0.0, 0);
  ASSERT_EQ(s.train.sequences.size(), 8u);
  EXPECT_TRUE(s.valid.sequences.empty());
  for (const auto& seq : s.train.sequences) EXPECT_EQ(seq.size(), 128u);
  const TokenSequence& last = s.train.sequences.back();
  EXPECT_EQ(last.count_id(ByteVocab::kPad), 24u);
  for (std::size_t i = 0; i < 128; ++i) {
    EXPECT_EQ(last.is_exempt(i), i >= 104);
    if (i < 104) EXPECT_EQ(last.ids[i], ids[7 * 128 + i]);
  }
  for (std::size_t w = 0; w + 1 < 8; ++w) EXPECT_EQ(s.train.sequences[w].count_id(ByteVocab::kPad), 0u);
}

TEST(Pack, ExactFitHasNoPadding) {
  const PackedSplit s = pack(iota_ids(128), 128, 0.0, 0);
  ASSERT_EQ(s.train.sequences.size(), 1u);
  EXPECT_EQ(s.train.sequences[0].count_id(ByteVocab::kPad), 0u);
  EXPECT_EQ(s.train.sequences[0].maskable_count(), 128u);
}

TEST(Pack, SplitIsDeterministicAndCoversEveryWindow) {
  RngStream rng(2);
  std::vector<std::int32_t> ids(20000);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.next_u64() % 256);
  const PackedSplit a = pack(ids, 64, 0.25, 9);
  const PackedSplit b = pack(ids, 64, 0.25, 9);
  ASSERT_EQ(a.train.sequences.size(), b.train.sequences.size());
  for (std::size_t i = 0; i < a.train.sequences.size(); ++i) {
    EXPECT_EQ(a.train.sequences[i].ids, b.train.sequences[i].ids);
  }
  const std::size_t windows = (20000 + 63) / 64;
  EXPECT_EQ(a.train.sequences.size() + a.valid.sequences.size(), windows);
  const double frac = static_cast<double>(a.valid.sequences.size()) / windows;
  EXPECT_NEAR(frac, 0.25, 0.1);
  EXPECT_EQ(a.train.digest, content_digest(ids));
  EXPECT_EQ(a.valid.split, Split::kValid);
  // A different seed moves windows between splits.
  auto heads = [](const PackedCorpus& part) {
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& seq : part.sequences) out.push_back(seq.ids);
    return out;
  };
  EXPECT_NE(heads(a.valid), heads(pack(ids, 64, 0.25, 10).valid));
}

TEST(Pack, NonPadTokensEqualCorpusLength) {
  RngStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.next_u64() % 3000;
    const std::size_t ctx = 2 + rng.next_u64() % 200;
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.next_u64() % 256);
    const PackedSplit s = pack(ids, ctx, rng.uniform(), rng.next_u64());
    std::size_t real = 0, padded = 0;
    for (const auto* part : {&s.train, &s.valid}) {
      for (const auto& seq : part->sequences) {
        EXPECT_EQ(seq.size(), ctx);
        real += seq.maskable_count();
        padded += seq.count_id(ByteVocab::kPad) > 0 ? 1 : 0;
      }
    }
    EXPECT_EQ(real, n);
    EXPECT_LE(padded, 1u);
  }
}

TEST(Pack, PaddingIsNeverMaskedOrScored) {
  const PackedSplit s = pack(iota_ids(70), 64, 0.0, 0);
  const TokenSequence& tail = s.train.sequences.back();
  RngStream rng(4);
  const TokenSequence masked = forward_mask(tail, 1.0, ByteVocab::kMask, rng);
  for (std::size_t i = 6; i < 64; ++i) EXPECT_EQ(masked.ids[i], ByteVocab::kPad);
  EXPECT_EQ(masked.count_id(ByteVocab::kMask), 6u);
  // Only the six data tokens are scored: an oracle that is right on data and
  // wrong on padding still has zero loss.
  std::vector<std::int32_t> clean(tail.ids.begin(), tail.ids.end());
  for (std::size_t i = 6; i < 64; ++i) clean[i] = 0;
  difflab::testing::OracleDenoiser<double> oracle(ByteVocab::kModelVocab, clean);
  const LossEstimate e = masked_loss_at(oracle, tail, 1.0, rng);
  EXPECT_EQ(e.masked_count, 6u);
  EXPECT_LE(e.value, 1e-6);
}

TEST(Pack, RejectsBadInputs) {
  const std::vector<std::int32_t> none;
  EXPECT_THROW(pack(none, 16, 0.0, 0), DomainError);
  EXPECT_THROW(pack(iota_ids(10), 1, 0.0, 0), ConfigError);
  EXPECT_THROW(pack(iota_ids(10), 16, 1.5, 0), ConfigError);
}

TEST(ReadCorpus, FilesAndDirectoriesInLexicographicOrder) {
  const fs::path root = fs::temp_directory_path() / "difflab_corpus_test";
  fs::remove_all(root);
  write_file(root / "b" / "2.txt", "two");
  write_file(root / "a.txt", "one");
  write_file(root / "b" / "1.txt", "ONE");
  write_file(root / "c.bin", std::string("\x00\x01", 2));
  EXPECT_EQ(read_corpus({root}), std::string("oneONEtwo\x00\x01", 11));
  EXPECT_EQ(read_corpus({root / "c.bin", root / "a.txt"}), std::string("\x00\x01one", 5));
  EXPECT_THROW(read_corpus({root / "missing.txt"}), DataError);
  fs::remove_all(root);
}
