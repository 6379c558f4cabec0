#include <algorithm>
#include <filesystem>
#include <set>

#include "denseclip/datagen.hpp"
#include "doctest.h"

using namespace denseclip;

namespace {

// First pixel values identify a sample well enough for split bookkeeping.
std::vector<double> key(const SyntheticSample& s) {
  return {s.image.data()[0], s.image.data()[1], s.image.data()[2]};
}

std::set<std::vector<double>> keys(const std::vector<SyntheticSample>& v) {
  std::set<std::vector<double>> out;
  for (const auto& s : v) out.insert(key(s));
  return out;
}

// Fraction of pixels whose color is closest to their own class mean.
double nearest_mean_accuracy(const TaskSpec& spec, Index n) {
  const auto sig = spec.resolved_signatures();
  Index hit = 0, total = 0;
  for (const auto& s : generate(spec, n, 3)) {
    const double* px = s.image.data();
    for (std::size_t p = 0; p < s.mask.size(); ++p) {
      int best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < sig.size(); ++k) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += (px[p * 3 + c] - sig[k].mean[c]) * (px[p * 3 + c] - sig[k].mean[c]);
        if (d < best_d) best_d = d, best = static_cast<int>(k);
      }
      hit += best == s.mask[p];
      ++total;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const TaskSpec spec;
  const auto a = generate(spec, 6, 1), b = generate(spec, 6, 1), c = generate(spec, 6, 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.value() == b[i].image.value());
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].image.value() != c[i].image.value());
  }
  CHECK(generate(spec, 0, 1).empty());
  CHECK_THROWS_AS(generate(spec, -1, 1), ConfigError);
}

TEST_CASE("sample geometry") {
  TaskSpec spec;
  spec.height = 16;
  spec.width = 24;
  spec.min_size = spec.max_size = 4;
  for (const auto& s : generate(spec, 5, 1)) {
    CHECK(s.image.shape() == Shape{16, 24, 3});
    CHECK(s.mask.size() == 16 * 24);
    CHECK(std::all_of(s.mask.begin(), s.mask.end(), [](int k) { return k >= 0 && k < 8; }));
  }
}

TEST_CASE("full-image rectangle") {
  TaskSpec spec;
  ShapeLayout r;
  r.class_id = 3;
  r.x0 = r.y0 = 0;
  r.x1 = r.y1 = 32;
  Rng rng(1);
  const SyntheticSample s = render_layout(spec, {r}, rng);
  CHECK(std::all_of(s.mask.begin(), s.mask.end(), [](int k) { return k == 3; }));
  REQUIRE(s.boxes.size() == 1);
  CHECK(s.boxes[0].class_id == 3);
  CHECK(s.boxes[0].x_min == 0.0);
  CHECK(s.boxes[0].y_min == 0.0);
  CHECK(s.boxes[0].x_max == 1.0);
  CHECK(s.boxes[0].y_max == 1.0);

  r.class_id = 8;
  CHECK_THROWS_AS(render_layout(spec, {r}, rng), IndexError);
}

TEST_CASE("hidden shapes get no box") {
  TaskSpec spec;
  ShapeLayout small, big;
  small.class_id = 2;
  small.x0 = small.y0 = 4;
  small.x1 = small.y1 = 8;
  big.class_id = 5;
  big.x0 = big.y0 = 0;
  big.x1 = big.y1 = 16;
  Rng rng(2);
  const SyntheticSample s = render_layout(spec, {small, big}, rng);
  REQUIRE(s.boxes.size() == 1);
  CHECK(s.boxes[0].class_id == 5);
  CHECK(s.boxes[0].x_max == 0.5);
}

TEST_CASE("disc coverage by pixel centers") {
  TaskSpec spec;
  ShapeLayout d;
  d.kind = ShapeKind::Disc;
  d.class_id = 1;
  d.cx = d.cy = 16.0;
  d.radius = 1.0;
  Rng rng(3);
  const SyntheticSample s = render_layout(spec, {d}, rng);
  // centers at (15.5|16.5, 15.5|16.5) are within 1 of (16, 16); (14.5, 15.5) is not
  CHECK(std::count(s.mask.begin(), s.mask.end(), 1) == 4);
  REQUIRE(s.boxes.size() == 1);
  CHECK(s.boxes[0].x_min == 15.0 / 32);
  CHECK(s.boxes[0].x_max == 17.0 / 32);
}

TEST_CASE("boxes agree with masks over many samples") {
  const TaskSpec spec;
  const Index H = spec.height, W = spec.width;
  for (const auto& s : generate(spec, 200, 4)) {
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        const int k = s.mask[static_cast<std::size_t>(y * W + x)];
        if (k == 0) continue;
        const double cx = (x + 0.5) / W, cy = (y + 0.5) / H;
        const bool boxed = std::any_of(s.boxes.begin(), s.boxes.end(), [&](const BoxAnnotation& b) {
          return b.class_id == k && cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
        });
        CHECK(boxed);
      }
    }
    for (const auto& b : s.boxes) {
      CHECK(b.class_id > 0);
      CHECK(b.x_min < b.x_max);
      CHECK(b.y_min < b.y_max);
      // tight: each edge row and column holds a pixel of the class
      const Index x0 = std::lround(b.x_min * W), x1 = std::lround(b.x_max * W) - 1;
      const Index y0 = std::lround(b.y_min * H), y1 = std::lround(b.y_max * H) - 1;
      auto has = [&](Index xa, Index xb, Index ya, Index yb) {
        for (Index y = ya; y <= yb; ++y) {
          for (Index x = xa; x <= xb; ++x) {
            if (s.mask[static_cast<std::size_t>(y * W + x)] == b.class_id) return true;
          }
        }
        return false;
      };
      CHECK(has(x0, x0, y0, y1));
      CHECK(has(x1, x1, y0, y1));
      CHECK(has(x0, x1, y0, y0));
      CHECK(has(x0, x1, y1, y1));
    }
  }
}

TEST_CASE("split") {
  const auto samples = generate(TaskSpec{}, 10, 5);
  const auto [train, eval] = split(samples, 0.5, 1);
  CHECK(train.size() == 5);
  CHECK(eval.size() == 5);
  const auto tk = keys(train), ek = keys(eval), all = keys(samples);
  CHECK(tk.size() == 5);
  for (const auto& k : tk) CHECK(ek.count(k) == 0);
  std::set<std::vector<double>> both = tk;
  both.insert(ek.begin(), ek.end());
  CHECK(both == all);

  const auto again = split(samples, 0.5, 1);
  CHECK(keys(again.first) == tk);
  CHECK(keys(split(samples, 0.5, 2).first) != tk);
  CHECK(split(samples, 1.0 / 3, 1).first.size() == 3);

  CHECK_THROWS_AS(split(samples, 0.0), ConfigError);
  CHECK_THROWS_AS(split(samples, 1.0), ConfigError);
  CHECK_THROWS_AS(split(samples, -0.5), ConfigError);
}

TEST_CASE("spec validation") {
  auto bad = [](auto edit) {
    TaskSpec s;
    edit(s);
    return s;
  };
  CHECK_NOTHROW(TaskSpec{}.validate());
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.classes = 1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.height = 30; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.max_shapes = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.min_size = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.max_size = 40; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.noise = -0.1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TaskSpec& s) { s.signatures.resize(3); }).validate(), ConfigError);
}

TEST_CASE("signatures") {
  TaskSpec spec;
  const auto drawn = spec.resolved_signatures();
  CHECK(drawn.size() == 8);
  CHECK(drawn[1].mean != drawn[2].mean);
  spec.signatures = std::vector<ClassSignature>(8);
  spec.signatures[4].frequency = 3.0;
  CHECK(spec.resolved_signatures()[4].frequency == 3.0);
}

TEST_CASE("task spec json round trip") {
  TaskSpec spec;
  spec.noise = 0.05;
  spec.seed = 42;
  spec.signatures = spec.resolved_signatures();
  const auto j = to_json(spec);
  const TaskSpec back = task_spec_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());
  CHECK(back.signatures.size() == 8);
}

TEST_CASE("dataset directory round trip") {
  Dataset d{TaskSpec{}, generate(TaskSpec{}, 4, 6)};
  const auto dir = std::filesystem::temp_directory_path() / "denseclip_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(dir, d);
  const Dataset back = load_dataset(dir);
  CHECK(to_json(back.spec).dump() == to_json(d.spec).dump());
  REQUIRE(back.samples.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.samples[i].image.value() == d.samples[i].image.value());
    CHECK(back.samples[i].mask == d.samples[i].mask);
    REQUIRE(back.samples[i].boxes.size() == d.samples[i].boxes.size());
    for (std::size_t b = 0; b < d.samples[i].boxes.size(); ++b) {
      CHECK(back.samples[i].boxes[b].class_id == d.samples[i].boxes[b].class_id);
      CHECK(back.samples[i].boxes[b].x_max == d.samples[i].boxes[b].x_max);
    }
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_dataset(dir));
}

TEST_CASE("noise controls separability") {
  TaskSpec clean;
  clean.noise = 0.02;
  clean.illumination = 0.0;
  clean.texture = 0.0;
  TaskSpec noisy = clean;
  noisy.noise = 1.0;
  noisy.illumination = 0.5;
  const double a = nearest_mean_accuracy(clean, 10), b = nearest_mean_accuracy(noisy, 10);
  CHECK(a > 0.95);
  CHECK(b < 0.6);
}
