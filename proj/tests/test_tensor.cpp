#include <cmath>
#include <sstream>

#include "denseclip/dct1.hpp"
#include "denseclip/gradcheck.hpp"
#include "denseclip/random.hpp"
#include "doctest.h"

using namespace denseclip;

namespace {

Tensor mat(Index r, Index c, std::vector<double> v, bool grad = false) { return Tensor::from_data({r, c}, v, grad); }

Tensor rnd(Shape s, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  return normal_tensor(std::move(s), 1.0, rng, grad);
}

}  // namespace

TEST_CASE("tensor storage invariants") {
  const Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK(Tensor::scalar(3.0).item() == 3.0);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("matmul examples and errors") {
  const Tensor id = mat(2, 2, {1, 0, 0, 1});
  const Tensor b = mat(2, 2, {5, 6, 7, 8});
  CHECK(matmul(id, b).value() == b.value());
  CHECK(matmul(mat(1, 2, {1, 2}), mat(2, 1, {3, 4})).item() == 11.0);
  try {
    matmul(mat(1, 2, {1, 2}), mat(3, 1, {1, 2, 3}));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2]") != std::string::npos);
    CHECK(msg.find("[3x1]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient against finite differences") {
  Tensor a = rnd({3, 4}, 1), b = rnd({4, 2}, 2);
  const auto r = grad_check<double>([&] { return sum(matmul(a, b)); }, {a, b}, 1e-5, 1e-6);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(mat(1, 3, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(u.value()(0, i) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Tensor p = softmax(mat(1, 2, {1, 0}));
  const double e = std::exp(1.0);
  CHECK(std::abs(p.value()(0, 0) - e / (1 + e)) < 1e-15);
  CHECK(std::abs(p.value()(0, 0) - 0.731059) < 1e-6);
  CHECK(std::abs(p.value()(0, 1) - 0.268941) < 1e-6);

  const Tensor x = rnd({4, 7}, 3);
  const Tensor shifted = add(x, Tensor::constant({4, 7}, 12.5));
  CHECK((softmax(x).value() - softmax(shifted).value()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("softmax rows sum to one on every axis") {
  const Tensor x = scale(rnd({3, 4, 5}, 4), 5.0);
  for (Index axis : {0, 1, 2}) {
    const Tensor y = softmax(x, axis);
    CHECK(y.value().minCoeff() > 0.0);
    CHECK(y.value().maxCoeff() < 1.0);
    const auto v = y.to_vector();
    const Index d0 = 3, d1 = 4, d2 = 5;
    auto at = [&](Index i, Index j, Index k) { return v[static_cast<std::size_t>((i * d1 + j) * d2 + k)]; };
    if (axis == 2) {
      for (Index i = 0; i < d0; ++i)
        for (Index j = 0; j < d1; ++j) {
          double s = 0;
          for (Index k = 0; k < d2; ++k) s += at(i, j, k);
          CHECK(std::abs(s - 1) < 1e-12);
        }
    } else if (axis == 1) {
      for (Index i = 0; i < d0; ++i)
        for (Index k = 0; k < d2; ++k) {
          double s = 0;
          for (Index j = 0; j < d1; ++j) s += at(i, j, k);
          CHECK(std::abs(s - 1) < 1e-12);
        }
    } else {
      for (Index j = 0; j < d1; ++j)
        for (Index k = 0; k < d2; ++k) {
          double s = 0;
          for (Index i = 0; i < d0; ++i) s += at(i, j, k);
          CHECK(std::abs(s - 1) < 1e-12);
        }
    }
  }
}

TEST_CASE("l2_normalize examples") {
  const Tensor y = l2_normalize(mat(1, 2, {3, 4}));
  CHECK(std::abs(y.value()(0, 0) - 0.6) < 1e-15);
  CHECK(std::abs(y.value()(0, 1) - 0.8) < 1e-15);
  const Tensor unit = mat(1, 3, {0, 1, 0});
  CHECK(l2_normalize(unit).value() == unit.value());
  const Tensor r = l2_normalize(rnd({5, 9}, 5));
  for (Index i = 0; i < 5; ++i) CHECK(std::abs(r.value().row(i).norm() - 1) < 1e-12);
  // below eps the slice is divided by eps
  const Tensor tiny = l2_normalize(mat(1, 2, {1e-14, 0}), -1, 1e-12);
  CHECK(std::abs(tiny.value()(0, 0) - 1e-2) < 1e-15);
}

TEST_CASE("cross_entropy examples") {
  const Index k = 150;
  std::vector<int> labels{0, 17, 149};
  const Tensor z = Tensor::zeros({3, k});
  CHECK(std::abs(cross_entropy(z, labels).item() - std::log(150.0)) < 1e-12);
  CHECK(std::abs(cross_entropy(z, labels).item() - 5.010635) < 1e-6);
  Tensor hot = Tensor::zeros({3, k});
  for (std::size_t i = 0; i < labels.size(); ++i) hot.mutable_value()(static_cast<Index>(i), labels[i]) = 1e4;
  CHECK(cross_entropy(hot, labels).item() < 1e-12);
  std::vector<int> bad{0, 150, 1};
  CHECK_THROWS_AS(cross_entropy(z, bad), IndexError);

  Tensor logits = rnd({4, 6}, 6);
  std::vector<int> y{1, 5, 0, 3};
  const auto r = grad_check<double>([&] { return cross_entropy(logits, y); }, {logits}, 1e-5, 1e-6);
  CHECK(r.passed);
}

TEST_CASE("bce_with_logits examples") {
  Tensor t = mat(2, 3, {1, 0, 1, 0, 0, 1});
  CHECK(std::abs(bce_with_logits(Tensor::zeros({2, 3}), t).item() - std::log(2.0)) < 1e-15);
  Tensor sat = Tensor::zeros({2, 3});
  for (Index i = 0; i < 6; ++i) sat.mutable_data()[i] = t.data()[i] > 0 ? 1e4 : -1e4;
  CHECK(bce_with_logits(sat, t).item() < 1e-12);
  CHECK_THROWS_AS(bce_with_logits(Tensor::zeros({2, 3}), mat(2, 3, {0.5, 0, 1, 0, 0, 1})), ValidationError);

  const Tensor x = scale(rnd({5, 4}, 7), 3.0);
  Tensor targets = Tensor::zeros({5, 4});
  for (Index i = 0; i < 20; ++i) targets.mutable_data()[i] = (i * 7) % 3 == 0 ? 1 : 0;
  double naive = 0;
  for (Index i = 0; i < 20; ++i) {
    const double s = 1 / (1 + std::exp(-x.data()[i]));
    const double tt = targets.data()[i];
    naive += -(tt * std::log(s) + (1 - tt) * std::log(1 - s));
  }
  CHECK(std::abs(bce_with_logits(x, targets).item() - naive / 20) < 1e-12);
}

TEST_CASE("backward basics") {
  Tensor x = rnd({2, 3, 2}, 8, true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  CHECK(x.grad() == Matrix::Ones(x.rows(), x.cols()));

  Tensor y = rnd({3, 4}, 9, true);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = sum(mul(y, y));
    tape.backward(loss);
    CHECK((y.grad() - 2 * y.value()).cwiseAbs().maxCoeff() < 1e-15);
    // a second call without reset accumulates
    tape.backward(loss);
    CHECK((y.grad() - 4 * y.value()).cwiseAbs().maxCoeff() < 1e-15);
  }

  Tensor z = rnd({2, 2}, 10, true);
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS_AS(tape.backward(mul(z, z)), ContractError);
}

TEST_CASE("backward without a tape is a contract error") {
  const Tensor x = Tensor::scalar(1.0, true);
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("tape is topologically ordered") {
  Tensor a = rnd({2, 3}, 11, true), b = rnd({3, 2}, 12, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor c = softmax(matmul(a, b));
  const Tensor d = sum(mul(c, c));
  (void)d;
  std::vector<const TensorNode<double>*> seen{a.node().get(), b.node().get()};
  for (const auto& e : tape.entries()) {
    for (const auto& in : e.inputs) CHECK(std::find(seen.begin(), seen.end(), in.get()) != seen.end());
    seen.push_back(e.output.get());
  }
}

TEST_CASE("composite matmul -> softmax -> cross entropy") {
  Tensor a = rnd({4, 3}, 13), w = rnd({3, 5}, 14);
  std::vector<int> y{0, 4, 2, 2};
  const auto r = grad_check<double>([&] { return cross_entropy(softmax(matmul(a, w)), y); }, {a, w}, 1e-5, 1e-5);
  CHECK(r.passed);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tensor a = rnd({5, 4}, 15, true), b = rnd({4, 6}, 16, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(gelu(softmax(matmul(a, b)))));
    return std::make_pair(a.grad(), b.grad());
  };
  const auto r1 = run(), r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("grad_check examples") {
  Tensor x = rnd({3, 3}, 17);
  const auto s = grad_check<double>([&] { return sum(x); }, {x});
  CHECK(s.max_rel_error < 1e-9);
  const auto n = grad_check<double>([&] { return sum(l2_normalize(x)); }, {x}, 1e-5, 1e-5);
  CHECK(n.passed);

  // corrupted rule: forward is x^2, backward claims 3x
  auto bad_square = [](const Tensor& in) {
    auto node = in.node();
    Matrix v = in.value().cwiseProduct(in.value());
    return record_op<double>("bad_square", in.shape(), std::move(v), {in},
                             [node](const Matrix& g) { node->accumulate(g.cwiseProduct(3.0 * node->value)); });
  };
  const auto bad = grad_check<double>([&] { return sum(bad_square(x)); }, {x});
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.1);
}

TEST_CASE("every op passes grad_check on three shapes") {
  const std::vector<std::pair<Index, Index>> shapes{{1, 3}, {4, 5}, {6, 2}};
  std::uint64_t seed = 100;
  for (auto [r, c] : shapes) {
    CAPTURE(r);
    CAPTURE(c);
    Tensor x = rnd({r, c}, seed++), y = rnd({r, c}, seed++), row = rnd({c}, seed++), w = rnd({c, 3}, seed++);
    Tensor s = Tensor::scalar(0.7), shift = rnd({c}, seed++);
    Tensor wt = rnd({3, c}, seed++), bias = rnd({3}, seed++);
    std::vector<int> labels;
    for (Index i = 0; i < r; ++i) labels.push_back(static_cast<int>(i % c));
    std::vector<Index> idx;
    for (Index i = 0; i < r + 2; ++i) idx.push_back((i * 5) % r);
    const auto t01 = Tensor::from_data({r, c}, std::vector<double>(static_cast<std::size_t>(r * c), 1.0));

    CHECK(grad_check<double>([&] { return matmul(x, w); }, {x, w}).passed);
    CHECK(grad_check<double>([&] { return matmul_nt(x, y); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return transpose(x); }, {x}).passed);
    CHECK(grad_check<double>([&] { return linear(x, wt, bias); }, {x, wt, bias}).passed);
    CHECK(grad_check<double>([&] { return add(x, y); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return sub(x, y); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return mul(x, y); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return scale(x, 1.7); }, {x}).passed);
    CHECK(grad_check<double>([&] { return scale_by(x, s); }, {x, s}).passed);
    CHECK(grad_check<double>([&] { return add_rowwise(x, row); }, {x, row}).passed);
    CHECK(grad_check<double>([&] { return mul_rowwise(x, row); }, {x, row}).passed);
    CHECK(grad_check<double>([&] { return gelu(x); }, {x}).passed);
    CHECK(grad_check<double>([&] { return sum(x); }, {x}).passed);
    CHECK(grad_check<double>([&] { return mean(x); }, {x}).passed);
    CHECK(grad_check<double>([&] { return mean_rows(x); }, {x}).passed);
    CHECK(grad_check<double>([&] { return softmax(x, -1); }, {x}).passed);
    CHECK(grad_check<double>([&] { return softmax(x, 0); }, {x}).passed);
    CHECK(grad_check<double>([&] { return l2_normalize(x, -1); }, {x}).passed);
    CHECK(grad_check<double>([&] { return l2_normalize(x, 0); }, {x}).passed);
    CHECK(grad_check<double>([&] { return layer_norm(x, row, shift); }, {x, row, shift}).passed);
    CHECK(grad_check<double>([&] { return cross_entropy(x, labels); }, {x}).passed);
    CHECK(grad_check<double>([&] { return bce_with_logits(x, t01); }, {x}).passed);
    CHECK(grad_check<double>([&] { return reshape(x, {c, r}); }, {x}).passed);
    CHECK(grad_check<double>([&] { return concat_rows<double>({x, y}); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return concat_cols<double>({x, y}); }, {x, y}).passed);
    CHECK(grad_check<double>([&] { return slice_rows(x, 0, r); }, {x}).passed);
    CHECK(grad_check<double>([&] { return slice_cols(x, c - 1, 1); }, {x}).passed);
    CHECK(grad_check<double>([&] { return gather_rows(x, std::span<const Index>(idx)); }, {x}).passed);
    CHECK(grad_check<double>([&] { return take(x, std::span<const Index>(idx), {static_cast<Index>(idx.size())}); }, {x})
              .passed);
  }
}

TEST_CASE("DCT1 layout and round trip") {
  const Tensor t = Tensor::from_data({2, 1, 3}, {1.5, -2, 0, 3.25, 1e-300, -0.0});
  std::ostringstream os;
  dct1::write(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 4 + 3 * 4 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "DCT1");
  CHECK(bytes[4] == 3);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 1);
  CHECK(bytes[16] == 3);
  // 1.5 = 0x3FF8000000000000, little endian
  CHECK(static_cast<unsigned char>(bytes[20 + 7]) == 0x3f);
  CHECK(static_cast<unsigned char>(bytes[20 + 6]) == 0xf8);

  std::istringstream is(bytes);
  const Tensor back = dct1::read(is);
  CHECK(back.shape() == t.shape());
  CHECK(back.value() == t.value());

  std::istringstream bad("DCT2");
  CHECK_THROWS_AS(dct1::read(bad), ValidationError);
  std::istringstream truncated(bytes.substr(0, 30));
  CHECK_THROWS_AS(dct1::read(truncated), ValidationError);
}
