#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "loire/layout_train.hpp"
#include "loire/text_encoder.hpp"
#include "oracles.hpp"

using namespace loire;

namespace {

EncoderConfig tiny(int vocab_size, std::uint64_t seed = 3) {
  return EncoderConfig{vocab_size, 16, 2, 2, 32, 16, 0.1, seed};
}

Tokenizer animal_tokenizer() { return Tokenizer(WordVocab({"a", "cat", "dog", "sat", "on", "the", "mat"})); }

}  // namespace

TEST(Tokenize, WrapsWordsInClsAndSep) {
  Tokenizer tok(WordVocab({"a", "cat"}));
  const auto seq = tok.tokenize("a cat", 128);
  EXPECT_EQ(seq.ids, (std::vector<int>{special::kCls, tok.vocab().id("a"), tok.vocab().id("cat"), special::kSep}));
  EXPECT_EQ(seq.real_length(), 4);
}

TEST(Tokenize, LowercasesSplitsPunctuationAndMapsUnknownWords) {
  Tokenizer tok(WordVocab({"a", "cat", "?"}));
  const auto seq = tok.tokenize("A cat? zebra", 128);
  EXPECT_EQ(seq.ids, (std::vector<int>{special::kCls, tok.vocab().id("a"), tok.vocab().id("cat"),
                                       tok.vocab().id("?"), special::kUnk, special::kSep}));
}

TEST(Tokenize, LongTextIsTruncatedToMaxLenKeepingSep) {
  Tokenizer tok(WordVocab({"w"}));
  std::string text;
  for (int i = 0; i < 500; ++i) text += "w ";
  const auto seq = tok.tokenize(text, 128);
  ASSERT_EQ(seq.length(), 128);
  EXPECT_EQ(seq.ids.front(), special::kCls);
  EXPECT_EQ(seq.ids.back(), special::kSep);
}

TEST(Tokenize, IsDeterministic) {
  const auto tok = animal_tokenizer();
  EXPECT_EQ(tok.tokenize("the cat sat on the mat", 32).ids, tok.tokenize("the cat sat on the mat", 32).ids);
}

TEST(Tokenize, EmptyTextIsRejected) {
  const auto tok = animal_tokenizer();
  EXPECT_THROW(tok.tokenize("   ", 32), TokenizerError);
}

TEST(Tokenize, PairKeepsBothSeparatorsAndSegments) {
  const auto tok = animal_tokenizer();
  const auto seq = tok.tokenize_pair("the cat", "on the mat", 32);
  ASSERT_EQ(seq.length(), 8);
  EXPECT_EQ(seq.ids[3], special::kSep);
  EXPECT_EQ(seq.ids.back(), special::kSep);
  EXPECT_EQ(seq.segments, (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
  const auto cut = tok.tokenize_pair("the cat sat on the mat", "a dog", 8);
  EXPECT_EQ(cut.length(), 8);
  EXPECT_EQ(std::count(cut.ids.begin(), cut.ids.end(), special::kSep), 2);
}

TEST(WordVocabFile, SaveLoadRoundTrip) {
  const auto v = WordVocab::build({"the cat sat", "a dog"});
  const std::string path = ::testing::TempDir() + "loire_vocab.txt";
  v.save(path);
  EXPECT_EQ(WordVocab::load(path).tokens(), v.tokens());
}

TEST(Encode, EvaluationModeIsBitwiseDeterministic) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  const auto seq = tok.tokenize("the cat sat on the mat", 16);
  const auto a = enc.encode(seq);
  const auto b = enc.encode(seq);
  EXPECT_EQ(a.vectors.value(), b.vectors.value());
  EXPECT_EQ(a.length(), seq.length());
}

TEST(Encode, SwappingTwoWordsChangesTheEmbeddings) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  const auto a = enc.encode(tok.tokenize("the cat sat", 16));
  const auto b = enc.encode(tok.tokenize("the sat cat", 16));
  EXPECT_NE(a.vectors.value(), b.vectors.value());
}

TEST(Encode, OutOfRangeIdIsRejected) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  auto seq = tok.tokenize("a cat", 16);
  seq.ids[1] = tok.vocab().size();
  EXPECT_THROW(enc.encode(seq), TokenizerError);
}

TEST(Encode, PaddingDoesNotChangeRealPositions) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  const auto seq = tok.tokenize("a cat sat", 16);
  const auto a = enc.encode(seq);
  const auto b = enc.encode(pad_to(seq, 12));
  for (std::size_t i = 0; i < a.vectors.size(); ++i) EXPECT_NEAR(a.vectors.value()[i], b.vectors.value()[i], 1e-12);
}

TEST(Pool, IdentityPoolerOfZeroIsZero) {
  ParamStore<double> store;
  nn::Linear<double> p{store.add("w", {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), store.add("b", {3}, {0, 0, 0})};
  TokenEmbeddings<double> emb{Var<double>::constant({2, 3}, {0, 0, 0, 5, -5, 9}), {1, 1}};
  const auto out = pool(emb, p);
  for (double v : out.value()) EXPECT_EQ(v, 0.0);
}

TEST(Pool, LargePositiveInputsStayInsideTheOpenUnitInterval) {
  ParamStore<double> store;
  nn::Linear<double> p{store.add("w", {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), store.add("b", {3}, {0, 0, 0})};
  TokenEmbeddings<double> emb{Var<double>::constant({1, 3}, {3, 5, 8}), {1}};
  const auto out = pool(emb, p);
  for (double v : out.value()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Pool, ReadsOnlyTheFirstPosition) {
  ParamStore<double> store;
  std::mt19937_64 rng(5);
  auto p = nn::Linear<double>::create(store, "p", 3, 3, rng, 1.0);
  TokenEmbeddings<double> a{Var<double>::constant({2, 3}, {0.1, 0.2, 0.3, 1, 2, 3}), {1, 1}};
  TokenEmbeddings<double> b{Var<double>::constant({2, 3}, {0.1, 0.2, 0.3, -7, 4, 0}), {1, 1}};
  EXPECT_EQ(pool(a, p).value(), pool(b, p).value());
}

TEST(Pool, EncoderOutputIsStrictlyInsideMinusOneOne) {
  const auto tok = animal_tokenizer();
  EncoderConfig cfg = tiny(tok.vocab().size());
  cfg.init_std = 0.5;  // wide enough that many components sit near the ends
  TextEncoder<double> enc(cfg);
  for (const char* text : {"a cat", "the dog sat on the mat", "mat mat mat"}) {
    const auto p = enc.pooled(enc.encode(tok.tokenize(text, 16)));
    for (double v : p.value()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Mlm, MaskCountUsesTheCeilingRule) {
  EXPECT_EQ(mlm_mask_count(10, 0.15), 2);
  EXPECT_EQ(mlm_mask_count(20, 0.15), 3);
  EXPECT_EQ(mlm_mask_count(1, 0.15), 1);
}

TEST(Mlm, UniformPredictorLossIsLogVocab) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  MlmHead<double> head(enc);
  // Zero token table and zero bias make every logit 0.
  for (auto& v : enc.params().get("encoder.tok_emb").mutable_value()) v = 0;
  std::mt19937_64 rng(1);
  const auto loss = mlm_step(enc, head, {tok.tokenize("the cat sat on the mat", 16)}, 0.15, Mode::eval, rng);
  EXPECT_NEAR(loss.item(), std::log(static_cast<double>(tok.vocab().size())), 1e-6);
}

TEST(Mlm, SaturatedCorrectLogitsDriveLossToZero) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  MlmHead<double> head(enc);
  const auto seq = tok.tokenize("cat cat cat", 16);
  const int cat = tok.vocab().id("cat");
  auto& bias = head.params().get("mlm.bias").mutable_value();
  double previous = 1e9;
  for (double big : {0.0, 10.0, 40.0}) {
    bias.assign(bias.size(), 0.0);
    bias[static_cast<std::size_t>(cat)] = big;
    std::mt19937_64 rng(2);
    const double loss = mlm_step(enc, head, {seq}, 0.5, Mode::eval, rng).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-6);
}

TEST(Mlm, SequenceWithoutMaskablePositionIsRejected) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  MlmHead<double> head(enc);
  TokenSequence only_specials{{special::kCls, special::kSep}, {0, 0}, {1, 1}};
  std::mt19937_64 rng(1);
  EXPECT_THROW(mlm_step(enc, head, {only_specials}, 0.15, Mode::eval, rng), MlmError);
}

TEST(Mlm, MasksExactlyTheCeilingCountOfRealTokens) {
  // Ten distinct real words at rate 0.15 must mask ceil(1.5) = 2 of them. With a zero token
  // table every logit equals the output bias, so d loss / d bias[j] = 1/V - c_j / k where c_j
  // counts masked targets equal to j and k is the masked count.
  Tokenizer tok(WordVocab({"w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"}));
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  MlmHead<double> head(enc);
  for (auto& v : enc.params().get("encoder.tok_emb").mutable_value()) v = 0;
  const auto seq = tok.tokenize("w0 w1 w2 w3 w4 w5 w6 w7 w8 w9", 16);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    head.params().zero_grad();
    std::mt19937_64 rng(seed);
    ag::backward(mlm_step(enc, head, {seq}, 0.15, Mode::eval, rng));
    const auto& g = head.params().get("mlm.bias").grad();
    const double V = tok.vocab().size();
    int targets = 0;
    for (double gj : g) {
      if (gj < 0) {
        ++targets;
        EXPECT_NEAR(gj, 1.0 / V - 0.5, 1e-12);
      } else {
        EXPECT_NEAR(gj, 1.0 / V, 1e-12);
      }
    }
    EXPECT_EQ(targets, 2);
  }
}

TEST(Gradient, PooledEncoderMatchesFiniteDifferences) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  const auto seq = pad_to(tok.tokenize_pair("the cat sat", "on the mat", 16), 12);
  const auto r = oracle::random_values(16, 4);
  auto loss = [&] {
    Var<double> p = enc.pooled(enc.encode(seq));
    return ag::sum(ag::mul(p, Var<double>::constant({1, 16}, r)));
  };
  const auto res = grad_check_params<double>(
      enc.params(), [](const std::string&) { return true; }, loss, 1e-5, 300, 1);
  EXPECT_GE(res.checked, 200u);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst_param;
}

TEST(Gradient, MlmLossMatchesFiniteDifferences) {
  const auto tok = animal_tokenizer();
  TextEncoder<double> enc(tiny(tok.vocab().size()));
  MlmHead<double> head(enc);
  ParamStore<double> all;
  all.merge(enc.params());
  all.merge(head.params());
  const std::vector<TokenSequence> batch = {tok.tokenize("the cat sat on the mat", 16), tok.tokenize("a dog", 16)};
  auto loss = [&] {
    std::mt19937_64 rng(5);
    return mlm_step(enc, head, batch, 0.3, Mode::eval, rng);
  };
  const auto res = grad_check_params<double>(
      all, [](const std::string&) { return true; }, loss, 1e-5, 300, 2);
  EXPECT_GE(res.checked, 200u);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst_param;
}
