#include "denseclip/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "denseclip/dct1.hpp"

namespace denseclip {

using nlohmann::json;
using nlohmann::ordered_json;

void TaskSpec::validate() const {
  if (classes < 2) throw ConfigError("task needs at least 2 classes (background plus one)");
  if (height < 1 || width < 1) throw ConfigError("image size must be positive");
  if (factor < 1 || height % factor != 0 || width % factor != 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by factor " + std::to_string(factor));
  }
  if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("shape count range is empty");
  if (min_size < 1 || max_size < min_size) throw ConfigError("shape size range is empty");
  if (max_size > std::min(height, width)) {
    throw ConfigError("shapes up to " + std::to_string(max_size) + " px do not fit a " + std::to_string(height) + "x" +
                      std::to_string(width) + " image");
  }
  if (noise < 0 || illumination < 0 || texture < 0) throw ConfigError("noise, illumination and texture must be >= 0");
  if (!signatures.empty() && static_cast<Index>(signatures.size()) != classes) {
    throw ConfigError("signature table has " + std::to_string(signatures.size()) + " rows for " +
                      std::to_string(classes) + " classes");
  }
}

std::vector<ClassSignature> TaskSpec::resolved_signatures() const {
  if (!signatures.empty()) return signatures;
  Rng rng(derive_seed(seed, "signatures"));
  std::uniform_real_distribution<double> mean(0.1, 0.9);
  std::uniform_real_distribution<double> freq(1.0, 4.0);
  std::vector<ClassSignature> out(static_cast<std::size_t>(classes));
  for (auto& s : out) {
    for (auto& m : s.mean) m = mean(rng);
    s.frequency = freq(rng);
  }
  return out;
}

ordered_json to_json(const TaskSpec& s) {
  ordered_json j;
  j["classes"] = s.classes;
  j["height"] = s.height;
  j["width"] = s.width;
  j["factor"] = s.factor;
  j["min_shapes"] = s.min_shapes;
  j["max_shapes"] = s.max_shapes;
  j["min_size"] = s.min_size;
  j["max_size"] = s.max_size;
  j["noise"] = s.noise;
  j["illumination"] = s.illumination;
  j["texture"] = s.texture;
  j["seed"] = s.seed;
  ordered_json sig = ordered_json::array();
  for (const auto& c : s.signatures) sig.push_back({{"mean", c.mean}, {"frequency", c.frequency}});
  j["signatures"] = sig;
  return j;
}

TaskSpec task_spec_from_json(const json& j) {
  TaskSpec d;
  TaskSpec s;
  s.classes = j.value("classes", d.classes);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.factor = j.value("factor", d.factor);
  s.min_shapes = j.value("min_shapes", d.min_shapes);
  s.max_shapes = j.value("max_shapes", d.max_shapes);
  s.min_size = j.value("min_size", d.min_size);
  s.max_size = j.value("max_size", d.max_size);
  s.noise = j.value("noise", d.noise);
  s.illumination = j.value("illumination", d.illumination);
  s.texture = j.value("texture", d.texture);
  s.seed = j.value("seed", d.seed);
  if (j.contains("signatures")) {
    for (const auto& c : j.at("signatures")) {
      s.signatures.push_back({c.at("mean").get<std::array<double, 3>>(), c.value("frequency", 1.0)});
    }
  }
  s.validate();
  return s;
}

namespace {

bool covers(const ShapeLayout& shape, Index x, Index y) {
  if (shape.kind == ShapeKind::Rectangle) return x >= shape.x0 && x < shape.x1 && y >= shape.y0 && y < shape.y1;
  const double dx = static_cast<double>(x) + 0.5 - shape.cx;
  const double dy = static_cast<double>(y) + 0.5 - shape.cy;
  return dx * dx + dy * dy <= shape.radius * shape.radius;
}

}  // namespace

SyntheticSample render_layout(const TaskSpec& spec, const std::vector<ShapeLayout>& layout, Rng& rng) {
  spec.validate();
  const auto signatures = spec.resolved_signatures();
  const Index H = spec.height, W = spec.width;
  for (const auto& shape : layout) {
    if (shape.class_id < 0 || shape.class_id >= spec.classes) {
      throw IndexError("shape class " + std::to_string(shape.class_id) + " outside [0, " +
                       std::to_string(spec.classes) + ")");
    }
  }

  // owner[p] = index of the topmost shape covering p, -1 for background
  std::vector<int> owner(static_cast<std::size_t>(H * W), -1);
  for (std::size_t s = 0; s < layout.size(); ++s) {
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        if (covers(layout[s], x, y)) owner[static_cast<std::size_t>(y * W + x)] = static_cast<int>(s);
      }
    }
  }

  SyntheticSample out;
  out.mask.resize(owner.size());
  std::normal_distribution<double> unit(0.0, 1.0);
  std::array<double, 3> shift{};
  for (auto& b : shift) b = spec.illumination * unit(rng);

  out.image = Tensor::zeros({H, W, 3});
  double* px = out.image.mutable_data();
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y * W + x);
      const int k = owner[p] < 0 ? 0 : layout[static_cast<std::size_t>(owner[p])].class_id;
      out.mask[p] = k;
      const auto& sig = signatures[static_cast<std::size_t>(k)];
      const double wave =
          spec.texture * std::sin(2.0 * std::numbers::pi * sig.frequency * static_cast<double>(x + y) / static_cast<double>(W));
      for (int c = 0; c < 3; ++c) px[p * 3 + c] = sig.mean[c] + wave + shift[c] + spec.noise * unit(rng);
    }
  }

  for (std::size_t s = 0; s < layout.size(); ++s) {
    Index x_lo = W, y_lo = H, x_hi = -1, y_hi = -1;
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        if (owner[static_cast<std::size_t>(y * W + x)] != static_cast<int>(s)) continue;
        x_lo = std::min(x_lo, x);
        x_hi = std::max(x_hi, x);
        y_lo = std::min(y_lo, y);
        y_hi = std::max(y_hi, y);
      }
    }
    if (x_hi < 0) continue;
    out.boxes.push_back({layout[s].class_id, static_cast<double>(x_lo) / W, static_cast<double>(y_lo) / H,
                         static_cast<double>(x_hi + 1) / W, static_cast<double>(y_hi + 1) / H});
  }
  return out;
}

std::vector<SyntheticSample> generate(const TaskSpec& spec, Index n, std::uint64_t split_seed) {
  spec.validate();
  if (n < 0) throw ConfigError("sample count must be non-negative");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::uint64_t base = derive_seed(spec.seed, split_seed);
  for (Index i = 0; i < n; ++i) {
    Rng rng(derive_seed(base, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<Index> count(spec.min_shapes, spec.max_shapes);
    std::uniform_int_distribution<Index> size(spec.min_size, spec.max_size);
    std::uniform_int_distribution<int> cls(1, static_cast<int>(spec.classes - 1));
    std::bernoulli_distribution disc(0.5);
    std::vector<ShapeLayout> layout(static_cast<std::size_t>(count(rng)));
    for (auto& shape : layout) {
      shape.class_id = cls(rng);
      if (disc(rng)) {
        const Index diameter = size(rng);
        shape.kind = ShapeKind::Disc;
        shape.radius = 0.5 * static_cast<double>(diameter);
        shape.cx = shape.radius + static_cast<double>(std::uniform_int_distribution<Index>(0, spec.width - diameter)(rng));
        shape.cy = shape.radius + static_cast<double>(std::uniform_int_distribution<Index>(0, spec.height - diameter)(rng));
      } else {
        const Index w = size(rng);
        const Index h = size(rng);
        shape.x0 = std::uniform_int_distribution<Index>(0, spec.width - w)(rng);
        shape.y0 = std::uniform_int_distribution<Index>(0, spec.height - h)(rng);
        shape.x1 = shape.x0 + w;
        shape.y1 = shape.y0 + h;
      }
    }
    out.push_back(render_layout(spec, layout, rng));
  }
  return out;
}

std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> split(const std::vector<SyntheticSample>& samples,
                                                                             double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(samples.size())));
  std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? out.first : out.second).push_back(samples[order[i]]);
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  const TaskSpec& s = data.spec;
  const Index n = static_cast<Index>(data.samples.size());
  Tensor images = Tensor::zeros({n, s.height, s.width, 3});
  Tensor masks = Tensor::zeros({n, s.height, s.width});
  ordered_json boxes = ordered_json::array();
  const Index pixels = s.height * s.width;
  for (Index i = 0; i < n; ++i) {
    const auto& sample = data.samples[static_cast<std::size_t>(i)];
    if (sample.image.size() != pixels * 3 || static_cast<Index>(sample.mask.size()) != pixels) {
      throw DimensionError("sample " + std::to_string(i) + " does not match the task image size");
    }
    std::copy_n(sample.image.data(), pixels * 3, images.mutable_data() + i * pixels * 3);
    for (Index p = 0; p < pixels; ++p) masks.mutable_data()[i * pixels + p] = sample.mask[static_cast<std::size_t>(p)];
    ordered_json list = ordered_json::array();
    for (const auto& b : sample.boxes) {
      list.push_back({{"class_id", b.class_id}, {"box", {b.x_min, b.y_min, b.x_max, b.y_max}}});
    }
    boxes.push_back(list);
  }
  std::ofstream(dir / "spec.json") << to_json(s).dump(2) << '\n';
  dct1::save(dir / "images.dct1", images);
  dct1::save(dir / "masks.dct1", masks);
  std::ofstream(dir / "boxes.json") << boxes.dump() << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream spec_in(dir / "spec.json");
  if (!spec_in) throw std::runtime_error("no spec.json in " + dir.string());
  Dataset data;
  data.spec = task_spec_from_json(json::parse(spec_in));
  const Tensor images = dct1::load(dir / "images.dct1");
  const Tensor masks = dct1::load(dir / "masks.dct1");
  std::ifstream box_in(dir / "boxes.json");
  if (!box_in) throw std::runtime_error("no boxes.json in " + dir.string());
  const json boxes = json::parse(box_in);
  const Index H = data.spec.height, W = data.spec.width;
  if (images.rank() != 4 || images.dim(1) != H || images.dim(2) != W || images.dim(3) != 3) {
    throw DimensionError("images.dct1 has shape " + to_string(images.shape()));
  }
  const Index n = images.dim(0);
  if (masks.shape() != Shape{n, H, W} || static_cast<Index>(boxes.size()) != n) {
    throw DimensionError("masks or boxes do not match " + std::to_string(n) + " images");
  }
  const Index pixels = H * W;
  for (Index i = 0; i < n; ++i) {
    SyntheticSample s;
    s.image = Tensor::zeros({H, W, 3});
    std::copy_n(images.data() + i * pixels * 3, pixels * 3, s.image.mutable_data());
    s.mask.resize(static_cast<std::size_t>(pixels));
    for (Index p = 0; p < pixels; ++p) s.mask[static_cast<std::size_t>(p)] = static_cast<int>(masks.data()[i * pixels + p]);
    for (const auto& b : boxes[static_cast<std::size_t>(i)]) {
      const auto c = b.at("box").get<std::array<double, 4>>();
      s.boxes.push_back({b.at("class_id").get<int>(), c[0], c[1], c[2], c[3]});
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace denseclip
