#include <cmath>
#include <filesystem>
#include <fstream>

#include "denseclip/pipeline.hpp"
#include "doctest.h"

using namespace denseclip;

namespace {

Tensor image(std::uint64_t seed) {
  Rng rng(seed);
  return uniform_tensor({32, 32, 3}, 1.0, rng);
}

PixelMask mask(std::uint64_t seed, Index classes = 8) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  PixelMask m;
  m.labels.resize(32 * 32);
  // 4x4 blocks so grid-level labels are well defined
  for (Index y = 0; y < 32; ++y) {
    for (Index x = 0; x < 32; ++x) {
      if (x % 4 == 0 && y % 4 == 0) m.labels[static_cast<std::size_t>(y * 32 + x)] = pick(rng);
      else m.labels[static_cast<std::size_t>(y * 32 + x)] = m.labels[static_cast<std::size_t>((y / 4 * 4) * 32 + x / 4 * 4)];
    }
  }
  return m;
}

DensePredPipeline make(PipelineConfig pc) {
  return DensePredPipeline(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
}

Tensor find(const DensePredPipeline& p, const std::string& name) {
  for (const auto& np : p.parameters()) {
    if (np.name == name) return np.tensor;
  }
  FAIL("no parameter " << name);
  return {};
}

std::filesystem::path tmp(const std::string& leaf) { return std::filesystem::temp_directory_path() / leaf; }

}  // namespace

TEST_CASE("default pipeline shapes") {
  const DensePredPipeline pipe = make({});
  const PipelineTarget target = mask(1);
  const PipelineOutput out = pipe.forward(image(2), &target);
  REQUIRE(out.logits.has_value());
  CHECK(out.logits->shape() == Shape{1024, 8});
  CHECK(out.scores.s.shape() == Shape{64, 8});
  CHECK(out.scores.h4 == 8);
  CHECK(out.text.t.shape() == Shape{8, 32});
  CHECK(pipe.fused_channels() == 40);
  CHECK(pipe.grid_height() == 8);
  CHECK(pipe.grid_width() == 8);
}

TEST_CASE("total loss is main plus weighted aux") {
  for (double w : {0.4, 0.0, 1.5}) {
    PipelineConfig pc;
    pc.loss.aux_weight = w;
    const DensePredPipeline pipe = make(pc);
    const PipelineTarget target = mask(3);
    const PipelineOutput out = pipe.forward(image(4), &target);
    CHECK(std::abs(out.loss.item() - (out.main_loss.item() + w * out.aux_loss.item())) < 1e-12);
    CHECK(out.aux_loss.item() > 0);
  }
}

TEST_CASE("step-zero loss is near the uniform value") {
  const DensePredPipeline pipe = make({});
  const PipelineTarget target = mask(5);
  const PipelineOutput out = pipe.forward(image(6), &target);
  const double uniform = std::log(8.0) * 1.4;
  CHECK(std::abs(out.loss.item() - uniform) < 0.2 * uniform);
}

TEST_CASE("no target gives zero losses") {
  const DensePredPipeline pipe = make({});
  const PipelineOutput out = pipe.forward(image(7), nullptr);
  CHECK(out.loss.item() == 0.0);
  CHECK(out.logits.has_value());
}

TEST_CASE("detection auxiliary mode skips the head") {
  PipelineConfig pc;
  pc.task = TaskMode::DetectionAux;
  const DensePredPipeline pipe = make(pc);
  const PipelineTarget boxes = std::vector<BoxAnnotation>{{2, 0.0, 0.0, 0.5, 0.5}, {5, 0.25, 0.5, 1.0, 1.0}};
  const PipelineOutput out = pipe.forward(image(8), &boxes);
  CHECK_FALSE(out.logits.has_value());
  CHECK(pipe.head_forward_count() == 0);
  CHECK(out.loss.item() == out.aux_loss.item());
  CHECK(out.aux_loss.item() > 0);

  const PipelineTarget wrong = mask(9);
  CHECK_THROWS_AS(pipe.forward(image(8), &wrong), ContractError);
  CHECK_THROWS_AS(pipe.predict_segmentation(image(8)), ContractError);
  const DensePredPipeline seg = make({});
  CHECK_THROWS_AS(seg.forward(image(8), &boxes), ContractError);

  pc.language = false;
  CHECK_THROWS_AS(pc.validate(), ConfigError);
}

TEST_CASE("score map feeds both the head and the aux loss") {
  PipelineConfig pc;
  pc.prompt = PromptMode::LanguageOnly;
  const PipelineTarget target = mask(10);
  for (double w : {0.0, 1.0}) {
    pc.loss.aux_weight = w;
    const DensePredPipeline pipe = make(pc);
    Tensor contexts = find(pipe, "prompt.contexts");
    Tape tape;
    TapeScope scope(tape);
    const PipelineOutput out = pipe.forward(image(11), &target);
    // w = 0: main path only; w = 1: aux alone
    tape.backward(w == 0.0 ? out.loss : out.aux_loss);
    REQUIRE(contexts.has_grad());
    CHECK(contexts.grad().cwiseAbs().maxCoeff() > 0);
  }
}

TEST_CASE("batch loss is the mean of per-image losses") {
  const DensePredPipeline pipe = make({});
  const Tensor a = image(12), b = image(13);
  const PipelineTarget ta = mask(14), tb = mask(15);
  const double want = 0.5 * (pipe.forward(a, &ta).loss.item() + pipe.forward(b, &tb).loss.item());
  CHECK(std::abs(pipe.batch_loss({&a, &b}, {&ta, &tb}).item() - want) < 1e-12);
  CHECK_THROWS_AS(pipe.batch_loss({&a}, {&ta, &tb}), DimensionError);
}

TEST_CASE("prediction ties resolve to the lowest class id") {
  const DensePredPipeline pipe = make({});
  Tensor w = find(pipe, "head.mix2.weight"), b = find(pipe, "head.mix2.bias");
  w.mutable_value().setZero();
  b.mutable_value().setZero();
  const auto labels = pipe.predict_segmentation(image(16));
  CHECK(labels.size() == 1024);
  CHECK(std::all_of(labels.begin(), labels.end(), [](int l) { return l == 0; }));

  b.mutable_value()(0, 6) = 1.0;
  b.mutable_value()(0, 3) = 1.0;
  const auto tied = predict_segmentation(pipe, image(16));
  CHECK(std::all_of(tied.begin(), tied.end(), [](int l) { return l == 3; }));
}

TEST_CASE("forward is deterministic and seeded") {
  const DensePredPipeline a = make({}), b = make({});
  CHECK(a.forward(image(17), nullptr).logits->value() == b.forward(image(17), nullptr).logits->value());
  PipelineConfig other;
  other.seed = 1;
  CHECK(make(other).forward(image(17), nullptr).logits->value() != a.forward(image(17), nullptr).logits->value());
}

TEST_CASE("text cache") {
  PipelineConfig pc;
  DensePredPipeline pipe = make(pc);
  const TextEmbeddings base = pipe.base_text_embeddings();
  const Matrix before = pipe.forward(image(18), nullptr).logits->value();
  CHECK_THROWS_AS(pipe.cached_text_embeddings(), ContractError);
  pipe.cache_text_embeddings();
  CHECK(pipe.has_text_cache());
  CHECK(cached_text_embeddings(pipe).t.value() == base.t.value());
  pipe.reset_counters();
  CHECK(pipe.forward(image(18), nullptr).logits->value() == before);
  CHECK(pipe.text_forward_count() == 0);
  pipe.clear_text_cache();
  CHECK_FALSE(pipe.has_text_cache());
  pipe.forward(image(18), nullptr);
  CHECK(pipe.text_forward_count() == 8);

  pc.prompt = PromptMode::PreModel;
  DensePredPipeline pre = make(pc);
  CHECK_THROWS_AS(pre.cache_text_embeddings(), ContractError);
  CHECK_THROWS_AS(pre.base_text_embeddings(), ContractError);
  pre.reset_counters();
  pre.forward(image(19), nullptr);
  CHECK(pre.text_forward_count() == 8);

  pc.language = false;
  DensePredPipeline plain = make(pc);
  CHECK_THROWS_AS(plain.cache_text_embeddings(), ContractError);
  CHECK(plain.forward(image(19), nullptr).scores.h4 == 0);
}

TEST_CASE("parameter counts by mode") {
  PipelineConfig pc;
  const Index post = make(pc).trainable_parameter_count();
  pc.prompt = PromptMode::PreModel;
  const Index pre = make(pc).trainable_parameter_count();
  pc.prompt = PromptMode::LanguageOnly;
  const Index coop = make(pc).trainable_parameter_count();
  CHECK(post < pre);
  CHECK(coop < post);
  pc.freeze_text = false;
  CHECK(make(pc).trainable_parameter_count() > coop);
}

TEST_CASE("swap_backbone keeps the text path") {
  const DensePredPipeline pipe = make({});
  const TextEmbeddings t = pipe.base_text_embeddings();
  ImageEncoderConfig ec = pipe.config().image;
  ec.width = 48;
  Rng rng(20);
  const DensePredPipeline swapped = swap_backbone(pipe, std::make_shared<PatchMlpBackbone>(ec, rng));
  CHECK(swapped.has_adapter());
  CHECK_FALSE(pipe.has_adapter());
  CHECK(swapped.image_encoder().kind() == "patch_mlp");
  CHECK(swapped.base_text_embeddings().t.value() == t.t.value());
  CHECK(swapped.forward(image(21), nullptr).logits->shape() == Shape{1024, 8});

  ec.width = 32;
  CHECK_FALSE(swap_backbone(pipe, std::make_shared<PatchMlpBackbone>(ec, rng)).has_adapter());
  ec.patch = 8;
  CHECK_THROWS_AS(swap_backbone(pipe, std::make_shared<PatchMlpBackbone>(ec, rng)), ConfigError);
  CHECK_THROWS_AS(swap_backbone(pipe, nullptr), ConfigError);
}

TEST_CASE("clone is independent") {
  const DensePredPipeline pipe = make({});
  const DensePredPipeline copy = pipe.clone();
  const Matrix before = pipe.forward(image(22), nullptr).logits->value();
  CHECK(copy.forward(image(22), nullptr).logits->value() == before);
  find(copy, "head.mix2.bias").mutable_value().array() += 1.0;
  CHECK(pipe.forward(image(22), nullptr).logits->value() == before);
}

TEST_CASE("checkpoint round trip") {
  PipelineConfig pc;
  pc.seed = 4;
  const DensePredPipeline pipe = make(pc);
  const auto dir = tmp("denseclip_test_ckpt");
  std::filesystem::remove_all(dir);
  pipe.save(dir);
  const DensePredPipeline back = DensePredPipeline::load(dir);
  CHECK(to_json(back.config()).dump() == to_json(pc).dump());
  const auto a = pipe.parameters(), b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.value() == b[i].tensor.value());
  }
  CHECK(back.forward(image(23), nullptr).logits->value() == pipe.forward(image(23), nullptr).logits->value());
  std::filesystem::remove_all(dir);
  CHECK_THROWS(DensePredPipeline::load(dir));
}

TEST_CASE("pipeline config json") {
  PipelineConfig pc;
  pc.classes = 5;
  pc.prompt = PromptMode::PreModel;
  pc.task = TaskMode::DetectionAux;
  pc.loss.temperature = 0.2;
  pc.gamma_init = 0.5;
  pc.seed = 9;
  const auto j = to_json(pc);
  CHECK(j.at("temperature").get<double>() == 0.2);
  CHECK(j.at("prompt").get<std::string>() == "pre");
  CHECK(to_json(pipeline_config_from_json(nlohmann::json::parse(j.dump()))).dump() == j.dump());
  CHECK(to_json(PipelineConfig{}).at("temperature").get<double>() == 0.07);

  PipelineConfig bad;
  bad.classes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.decoder_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.prompt = PromptMode::PreModel;
  bad.context_length = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.loss.temperature = 0;
  CHECK_THROWS_AS(make(bad), ConfigError);
  CHECK_THROWS_AS(DensePredPipeline(PipelineConfig{}, ClassTokenTable::synthetic(5, 8)), ConfigError);
}

TEST_CASE("prediction exports") {
  const std::vector<int> labels{0, 1, 2, 3, 4, 5};
  const auto jp = tmp("denseclip_test_pred.json"), pp = tmp("denseclip_test_pred.pgm");
  export_prediction_json(labels, 2, 3, jp);
  std::ifstream jin(jp);
  const auto j = nlohmann::json::parse(jin);
  CHECK(j.at("height") == 2);
  CHECK(j.at("width") == 3);
  CHECK(j.at("labels").get<std::vector<int>>() == labels);

  export_prediction_pgm(labels, 2, 3, 8, pp);
  std::ifstream pin(pp);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  pin >> magic >> w >> h >> maxv;
  CHECK(magic == "P2");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxv == 7);
  std::vector<int> read(6);
  for (auto& v : read) pin >> v;
  CHECK(read == labels);
  std::filesystem::remove(jp);
  std::filesystem::remove(pp);
}
