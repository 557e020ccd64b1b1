#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "loire/checkpoint.hpp"
#include "loire/text_encoder.hpp"
#include "support.hpp"

using namespace loire;
using testing_support::TempDir;

namespace {

ParamStore<float> sample_store() {
  ParamStore<float> s;
  std::mt19937_64 rng(3);
  s.add_normal("encoder.a", {3, 4}, rng, 0.5f);
  s.add_normal("encoder.b", {5}, rng, 0.5f);
  s.add_constant("head.c", {2, 2}, 1.5f);
  return s;
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  TempDir dir;
  auto store = sample_store();
  const auto ck = make_checkpoint(store, {{"stage", "layout"}});
  save_checkpoint(ck, dir.file("a.ckpt"));
  const auto loaded = load_checkpoint(dir.file("a.ckpt"));
  EXPECT_EQ(loaded.meta["stage"], "layout");
  save_checkpoint(loaded, dir.file("b.ckpt"));
  EXPECT_EQ(testing_support::read_file(dir.file("a.ckpt")), testing_support::read_file(dir.file("b.ckpt")));

  auto fresh = sample_store();
  for (std::size_t i = 0; i < fresh.size(); ++i)
    for (auto& v : fresh.at(i).mutable_value()) v = 0;
  apply_checkpoint(loaded, fresh);
  for (std::size_t i = 0; i < fresh.size(); ++i) EXPECT_EQ(fresh.at(i).value(), store.at(i).value());
  EXPECT_EQ(param_digest(fresh), param_digest(store));
}

TEST(Checkpoint, DoublePrecisionValuesSurviveExactly) {
  ParamStore<double> s;
  s.add_constant("x", {3}, 0.0);
  s.get("x").mutable_value() = {1.0 / 3.0, -1e-300, 12345.678901234567};
  const auto ck = parse_checkpoint(serialize_checkpoint(make_checkpoint(s)));
  ParamStore<double> t;
  t.add_constant("x", {3}, 0.0);
  apply_checkpoint(ck, t);
  EXPECT_EQ(t.get("x").value(), s.get("x").value());
}

TEST(Checkpoint, SinglePrecisionLoadsIntoDoubleModels) {
  auto store = sample_store();
  const auto ck = make_checkpoint(store);
  ParamStore<double> wide;
  std::mt19937_64 rng(0);
  wide.add_normal("encoder.a", {3, 4}, rng);
  wide.add_normal("encoder.b", {5}, rng);
  wide.add_constant("head.c", {2, 2}, 0.0);
  apply_checkpoint(ck, wide);
  for (std::size_t i = 0; i < wide.size(); ++i)
    for (std::size_t k = 0; k < wide.at(i).size(); ++k)
      EXPECT_EQ(wide.at(i).value()[k], static_cast<double>(store.at(i).value()[k]));
}

TEST(Checkpoint, TruncationNamesTheMissingArray) {
  const std::string bytes = serialize_checkpoint(make_checkpoint(sample_store()));
  const auto header = bytes.find("arrays/encoder.b.bin");
  ASSERT_NE(header, std::string::npos);
  const std::size_t cut = header + 512 + 8;
  try {
    parse_checkpoint(bytes.substr(0, cut), "cut.ckpt");
    FAIL() << "expected a CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("missing array 'encoder.b'"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RejectsGarbageAndForeignVersions) {
  EXPECT_THROW(parse_checkpoint("not a tar"), CheckpointError);
  auto ck = make_checkpoint(sample_store());
  std::string bytes = serialize_checkpoint(ck);
  const auto pos = bytes.find("\"version\": 1");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 11] = '7';
  EXPECT_THROW(parse_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, ApplyReportsMissingNamesAndShapeMismatches) {
  const auto ck = make_checkpoint(sample_store());
  ParamStore<float> other;
  other.add_constant("encoder.zzz", {1}, 0.f);
  EXPECT_THROW(apply_checkpoint(ck, other), CheckpointError);
  ParamStore<float> reshaped;
  reshaped.add_constant("encoder.a", {4, 3}, 0.f);
  EXPECT_THROW(apply_checkpoint(ck, reshaped), CheckpointError);
}

TEST(Checkpoint, RenamedPrefixesLoad) {
  const auto ck = make_checkpoint(sample_store());
  ParamStore<float> lm;
  lm.add_constant("lm.a", {3, 4}, 0.f);
  apply_checkpoint(ck, lm, "lm.", "encoder.");
  EXPECT_EQ(lm.get("lm.a").value(), sample_store().get("encoder.a").value());
}

TEST(ParamDigest, ChangesWithAnyValueAndRespectsThePrefix) {
  auto store = sample_store();
  const auto all = param_digest(store), enc = param_digest(store, "encoder.");
  EXPECT_NE(all, enc);
  store.get("head.c").mutable_value()[3] = 1.25f;
  EXPECT_NE(param_digest(store), all);
  EXPECT_EQ(param_digest(store, "encoder."), enc);
  store.get("encoder.b").mutable_value()[0] = std::nextafter(store.get("encoder.b").value()[0], 1e9f);
  EXPECT_NE(param_digest(store, "encoder."), enc);
}

TEST(ParamDigest, IsDeterministicAcrossIdenticalModels) {
  EncoderConfig cfg{30, 16, 1, 2, 32, 16, 0.0, 9};
  TextEncoder<float> a(cfg), b(cfg);
  EXPECT_EQ(param_digest(a.params()), param_digest(b.params()));
  cfg.seed = 10;
  TextEncoder<float> c(cfg);
  EXPECT_NE(param_digest(a.params()), param_digest(c.params()));
}

TEST(VocabHash, DependsOnOrder) {
  EXPECT_EQ(vocab_hash({"a", "b"}), sha256_hex("a\nb\n"));
  EXPECT_NE(vocab_hash({"a", "b"}), vocab_hash({"b", "a"}));
}
