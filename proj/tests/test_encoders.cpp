#include <algorithm>
#include <filesystem>
#include <numeric>

#include "denseclip/encoders.hpp"
#include "denseclip/gradcheck.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace denseclip;

namespace {

Tensor rnd(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return normal_tensor(std::move(s), sd, rng);
}

Tensor image(Index h, Index w, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_tensor({h, w, 3}, 1.0, rng);
}

TextEncoderConfig small_text(Index vocab = 12, Index max_length = 16) {
  TextEncoderConfig c;
  c.vocab_size = vocab;
  c.width = 16;
  c.embed_dim = 8;
  c.blocks = 2;
  c.heads = 2;
  c.max_length = max_length;
  return c;
}

}  // namespace

TEST_CASE("attention pool on a constant map") {
  Rng rng(1);
  const MhsaLayer pool = MhsaLayer::init(8, 2, rng);
  Matrix v = rnd({1, 8}, 2).value();
  FeatureMap x4{3, 3, Tensor::from_matrix(v.replicate(9, 1))};
  const PooledFeatures p = attention_pool(pool, x4);
  for (Index i = 0; i < 9; ++i) CHECK((p.dense.value().row(i) - p.global.value().row(0)).cwiseAbs().maxCoeff() < 1e-12);
  // z_bar is the MHSA output of the mean token, here v itself
  CHECK((p.global.value() - oracle::mhsa(pool, v, v)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention pool 2x2 matches mean-concat-attention oracle") {
  Rng rng(3);
  const MhsaLayer pool = MhsaLayer::init(8, 4, rng);
  const Tensor x = rnd({4, 8}, 4);
  const PooledFeatures p = attention_pool(pool, FeatureMap{2, 2, x});
  Matrix seq(5, 8);
  seq.row(0) = x.value().colwise().mean();
  seq.bottomRows(4) = x.value();
  const Matrix want = oracle::mhsa(pool, seq, seq);
  CHECK((p.global.value() - want.topRows(1)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((p.dense.value() - want.bottomRows(4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("attention pool permutation equivariance") {
  Rng rng(5);
  const MhsaLayer pool = MhsaLayer::init(8, 2, rng);
  const Tensor x = rnd({12, 8}, 6);
  const PooledFeatures base = attention_pool(pool, FeatureMap{3, 4, x});
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const PooledFeatures p = attention_pool(pool, FeatureMap{3, 4, gather_rows(x, std::span<const Index>(perm))});
    for (Index i = 0; i < 12; ++i) {
      CHECK((p.dense.value().row(i) - base.dense.value().row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <
            1e-10);
    }
    CHECK((p.global.value() - base.global.value()).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("toy image encoder geometry") {
  Rng rng(7);
  ImageEncoderConfig cfg;
  const ToyImageEncoder enc(cfg, rng);
  const EncodedImage e = encode_image(enc, image(32, 32, 8));
  CHECK(e.features.h4 == 8);
  CHECK(e.features.w4 == 8);
  CHECK(e.features.positions() == 64);
  CHECK(e.features.channels() == 32);
  CHECK(e.pooled.dense.shape() == Shape{64, 32});
  CHECK(e.pooled.global.shape() == Shape{1, 32});
  CHECK(enc.out_dim() == cfg.embed_dim);
  CHECK(enc.factor() == 4);

  ImageEncoderConfig bad = cfg;
  bad.image_height = 30;
  CHECK_THROWS_AS(ToyImageEncoder(bad, rng), ConfigError);
  CHECK_THROWS_AS(enc.encode(image(28, 32, 9)), DimensionError);
  CHECK_THROWS_AS(enc.encode(rnd({32, 32, 4}, 9)), DimensionError);
}

TEST_CASE("patch gather index rearranges patches") {
  const auto idx = patch_gather_index(4, 4, 2);
  REQUIRE(idx.size() == 48);
  // second patch row starts at pixel (0, 2)
  CHECK(idx[12] == (0 * 4 + 2) * 3);
  // first patch, second pixel row: pixel (1, 0)
  CHECK(idx[6] == (1 * 4 + 0) * 3);
}

TEST_CASE("image encoder gradient wrt image") {
  ImageEncoderConfig cfg;
  cfg.image_height = cfg.image_width = 8;
  cfg.patch = 2;
  cfg.width = cfg.embed_dim = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  Rng rng(10);
  const ToyImageEncoder enc(cfg, rng);
  Tensor img = image(8, 8, 11);
  const auto r = grad_check<double>(
      [&] {
        const EncodedImage e = enc.encode(img);
        return concat_rows<double>({e.features.values, e.pooled.global, e.pooled.dense});
      },
      {img}, 1e-5, 1e-4);
  CHECK(r.passed);
}

TEST_CASE("patch mlp backbone pools by spatial mean") {
  ImageEncoderConfig cfg;
  cfg.width = 20;
  Rng rng(12);
  const PatchMlpBackbone enc(cfg, rng);
  const EncodedImage e = enc.encode(image(32, 32, 13));
  CHECK(enc.out_dim() == 20);
  CHECK(enc.kind() == "patch_mlp");
  CHECK(e.features.channels() == 20);
  CHECK(e.pooled.dense.value() == e.features.values.value());
  CHECK((e.pooled.global.value() - e.features.values.value().colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(make_backbone("resnet", cfg, rng), ConfigError);
  CHECK(make_backbone("toy_vit", cfg, rng)->kind() == "toy_vit");
}

TEST_CASE("encode_text minimal case and determinism") {
  Rng rng(14);
  const ToyTextEncoder enc(small_text(), rng);
  const TextEmbeddings one = enc.encode_text({{3}});
  CHECK(one.t.shape() == Shape{1, 8});
  CHECK(one.t.value() == enc.encode_sequence(Tensor::zeros({0, 16}), std::vector<int>{3}).value());

  const TextEmbeddings twin = enc.encode_text({{4, 5}, {4, 5}, {6}});
  CHECK(twin.t.value().row(0) == twin.t.value().row(1));
  CHECK(twin.t.value().row(0) != twin.t.value().row(2));
}

TEST_CASE("encode_text with eight context slots") {
  Rng rng(15);
  const Tensor ctx = rnd({8, 16}, 16);
  const ToyTextEncoder fits(small_text(12, 10), rng);
  const TextEmbeddings t = fits.encode_text(ctx, {{1, 2}, {3}});
  CHECK(t.class_count() == 2);
  CHECK(fits.forward_count() == 2);
  Rng rng2(15);
  const ToyTextEncoder short_enc(small_text(12, 9), rng2);
  CHECK_THROWS_AS(short_enc.encode_text(ctx, {{1, 2}}), ConfigError);
}

TEST_CASE("encode_text errors") {
  Rng rng(17);
  const ToyTextEncoder enc(small_text(), rng);
  CHECK_THROWS_AS(enc.encode_text({{12}}), VocabularyError);
  CHECK_THROWS_AS(enc.encode_text({{-1}}), VocabularyError);
  CHECK_THROWS_AS(enc.encode_text({{}}), ValidationError);
  CHECK_THROWS_AS(enc.encode_text(rnd({2, 5}, 18), {{1}}), DimensionError);
}

TEST_CASE("encode_text is row independent") {
  Rng rng(19);
  const ToyTextEncoder enc(small_text(), rng);
  const Tensor ctx = rnd({3, 16}, 20);
  const std::vector<std::vector<int>> classes{{1}, {2, 3}, {4, 5, 6}, {7}};
  const TextEmbeddings all = enc.encode_text(ctx, classes);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const TextEmbeddings alone = enc.encode_text(ctx, {classes[k]});
    CHECK((alone.t.value().row(0) - all.t.value().row(static_cast<Index>(k))).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("freeze leaves contexts trainable") {
  Rng rng(21);
  ToyTextEncoder enc(small_text(), rng);
  freeze(enc);
  CHECK(enc.frozen());
  ParamList params;
  enc.collect(params, "text");
  CHECK(std::none_of(params.begin(), params.end(), [](const NamedParam& p) { return p.tensor.requires_grad(); }));
  CHECK(std::all_of(params.begin(), params.end(), [](const NamedParam& p) { return p.group == ParamGroup::TextEncoder; }));

  Tensor ctx = rnd({2, 16}, 22);
  ctx.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(enc.encode_text(ctx, {{1}, {2}}).t));
  }
  CHECK(ctx.has_grad());
  CHECK(ctx.grad().cwiseAbs().maxCoeff() > 0);
  for (const auto& p : params) CHECK_FALSE(p.tensor.has_grad());

  enc.unfreeze();
  CHECK(std::all_of(params.begin(), params.end(), [](const NamedParam& p) { return p.tensor.requires_grad(); }));
}

TEST_CASE("synthetic class token table") {
  const ClassTokenTable t = ClassTokenTable::synthetic(8, 8);
  CHECK(t.class_count() == 8);
  CHECK(t.names[0] == "background");
  CHECK(t.template_tokens.size() == 8);
  const int eot = t.tokens[0].back();
  int expected_next = 8;
  for (Index k = 0; k < 8; ++k) {
    const auto& ids = t.tokens[static_cast<std::size_t>(k)];
    CHECK(static_cast<Index>(ids.size()) == 2 + k % 3);
    CHECK(ids.back() == eot);
    for (std::size_t j = 0; j + 1 < ids.size(); ++j) CHECK(ids[j] == expected_next++);
  }
  CHECK(eot == expected_next);
  CHECK(t.vocab_size() == eot + 1);
}

TEST_CASE("class token table file round trip") {
  const ClassTokenTable t = ClassTokenTable::synthetic(5, 4);
  const auto path = std::filesystem::temp_directory_path() / "denseclip_test_tokens.json";
  t.save(path);
  const ClassTokenTable back = ClassTokenTable::load(path, 4);
  CHECK(back.names == t.names);
  CHECK(back.tokens == t.tokens);
  CHECK(back.template_tokens == t.template_tokens);
  std::filesystem::remove(path);
}
