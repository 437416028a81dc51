#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "dswp/tensor.hpp"

using namespace dswp;

namespace {

Tensor rand_tensor(const Shape& s, Philox& rng, float scale = 1.0f) {
  std::vector<float> v(numel_of(s));
  rng.fill_normal(v);
  for (float& x : v) x *= scale;
  return Tensor::from(s, std::move(v));
}

/// Shift values away from |x| < margin (for kinked ops like relu).
Tensor away_from_zero(const Tensor& t, float margin) {
  std::vector<float> v = t.vec();
  for (float& x : v) {
    if (std::abs(x) < margin) x = x >= 0 ? x + margin : x - margin;
  }
  return Tensor::from(t.shape(), std::move(v));
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Checks d(scalar op output)/d(input j) against central differences for
/// every input, on `trials` random draws.
void check_grads(const char* name, const OpFn& op, const std::vector<Shape>& shapes,
                 const std::function<Tensor(const Shape&, Philox&)>& draw, int trials = 100,
                 double h = 1e-3, double tol = 1e-3) {
  Philox rng(0xC0FFEE, 17);
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> inputs;
    for (const Shape& s : shapes) inputs.push_back(draw(s, rng));

    // Reference gradient via backward().
    std::vector<Tensor> tracked;
    for (const Tensor& t : inputs) tracked.push_back(t.clone_as_leaf(true));
    Tensor out = op(tracked);
    REQUIRE(out.numel() == 1);
    backward(out);

    for (size_t j = 0; j < inputs.size(); ++j) {
      auto f = [&](const Tensor& x) {
        std::vector<Tensor> probe = inputs;
        probe[j] = x;
        return static_cast<double>(op(probe).item());
      };
      Tensor fd = finite_diff_grad(f, inputs[j], h, 1);
      REQUIRE_MESSAGE(tracked[j].has_grad(), name, " input ", j, " got no gradient");
      double err = rel_error(tracked[j].grad(), fd.vec());
      CHECK_MESSAGE(err < tol, name, " input ", j, " trial ", trial, " rel err ", err);
      if (err >= tol) return;  // one detailed failure is enough
    }
  }
}

Tensor weighted_sum(const Tensor& t, uint64_t wseed) {
  Philox rng(wseed, 3);
  Tensor w = rand_tensor(t.shape(), rng);
  return dot(t, w);
}

}  // namespace

TEST_CASE("forward op examples") {
  // identity graph: a tensor is its own output
  Philox rng(1);
  Tensor x = rand_tensor({2, 3}, rng);
  CHECK(reshape(x, x.shape()).vec() == x.vec());

  // sum of all-ones (2,3) is 6
  CHECK(sum_all(Tensor::full({2, 3}, 1.0f)).item() == doctest::Approx(6.0).epsilon(1e-7));

  // conv2d with a 3x3 kernel of ones, stride 1, pad 1 on 5x5 ones: the center
  // sees the full kernel -> 9; corners see 4 taps -> 4 (hand-computed).
  Tensor img = Tensor::full({1, 5, 5}, 1.0f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor out = conv2d(img, w, Tensor::zeros({1}), 1, 1);
  CHECK(out.at(2 * 5 + 2) == doctest::Approx(9.0));
  CHECK(out.at(0) == doctest::Approx(4.0));
  CHECK(out.at(2) == doctest::Approx(6.0));
}

TEST_CASE("forward determinism is bit-exact") {
  Philox rng(2);
  Tensor x = rand_tensor({4, 8, 8}, rng);
  Tensor w = rand_tensor({6, 4, 3, 3}, rng);
  Tensor b = rand_tensor({6}, rng);
  Tensor a = conv2d(silu(x), w, b, 2, 1);
  Tensor c = conv2d(silu(x), w, b, 2, 1);
  CHECK(a.vec() == c.vec());
}

TEST_CASE("backward basics") {
  // d(sum x)/dx = 1
  Philox rng(3);
  Tensor x = rand_tensor({3, 4}, rng).clone_as_leaf(true);
  backward(sum_all(x));
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));

  // d(0.5 ||x||^2)/dx = x
  Tensor y = Tensor::from({3}, {1, 2, 3}, true);
  backward(mul_scalar(sumsq(y), 0.5));
  CHECK(y.grad()[0] == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK(y.grad()[1] == doctest::Approx(2.0f).epsilon(1e-6));
  CHECK(y.grad()[2] == doctest::Approx(3.0f).epsilon(1e-6));
}

TEST_CASE("cosine loss gradient matches finite differences") {
  Philox rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = l2_normalize(rand_tensor({12}, rng)).detach();
    Tensor b = l2_normalize(rand_tensor({12}, rng)).detach();
    Tensor bt = b.clone_as_leaf(true);
    backward(add_scalar(mul_scalar(cosine(a, bt), -1.0), 1.0));
    auto f = [&](const Tensor& v) {
      return 1.0 - static_cast<double>(cosine(a, v).item());
    };
    Tensor fd = finite_diff_grad(f, b, 1e-3, 1);
    CHECK(rel_error(bt.grad(), fd.vec()) < 1e-3);
  }
}

TEST_CASE("finite_diff_grad oracle sanity") {
  // f = sum: gradient is all-ones within 1e-4
  Philox rng(5);
  Tensor x = rand_tensor({7}, rng);
  Tensor g = finite_diff_grad([](const Tensor& t) { return double(sum_all(t).item()); }, x, 1e-3);
  for (float v : g.vec()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-4));

  // f = x^2 at x=3: derivative 6
  Tensor x3 = Tensor::scalar(3.0f);
  Tensor g2 = finite_diff_grad([](const Tensor& t) { return double(t.item()) * t.item(); }, x3,
                               1e-3);
  CHECK(g2.item() == doctest::Approx(6.0).epsilon(1e-3));

  // threaded evaluation returns identical values
  Tensor big = rand_tensor({64}, rng);
  auto f = [](const Tensor& t) { return double(sumsq(t).item()); };
  CHECK(finite_diff_grad(f, big, 1e-3, 1).vec() == finite_diff_grad(f, big, 1e-3, 4).vec());

  CHECK_THROWS_AS(finite_diff_grad(f, big, 0.0), Error);
  CHECK_THROWS_AS(
      finite_diff_grad([](const Tensor&) { return std::nan(""); }, x3, 1e-3), Error);
}

TEST_CASE("every primitive passes the finite-difference property test") {
  auto normal = [](const Shape& s, Philox& rng) { return rand_tensor(s, rng); };
  auto nonzero = [](const Shape& s, Philox& rng) {
    return away_from_zero(rand_tensor(s, rng), 0.05f);
  };

  check_grads("add", [](const std::vector<Tensor>& v) {
    return weighted_sum(add(v[0], v[1]), 11);
  }, {{2, 3, 4}, {2, 3, 4}}, normal);

  check_grads("sub", [](const std::vector<Tensor>& v) {
    return weighted_sum(sub(v[0], v[1]), 12);
  }, {{2, 3, 4}, {2, 3, 4}}, normal);

  check_grads("mul", [](const std::vector<Tensor>& v) {
    return weighted_sum(mul(v[0], v[1]), 13);
  }, {{2, 3, 4}, {2, 3, 4}}, normal);

  check_grads("add_scalar", [](const std::vector<Tensor>& v) {
    return weighted_sum(add_scalar(v[0], 0.37), 14);
  }, {{3, 5}}, normal);

  check_grads("mul_scalar", [](const std::vector<Tensor>& v) {
    return weighted_sum(mul_scalar(v[0], -1.7), 15);
  }, {{3, 5}}, normal);

  check_grads("axpby", [](const std::vector<Tensor>& v) {
    return weighted_sum(axpby(0.8, v[0], -0.3, v[1]), 16);
  }, {{2, 7}, {2, 7}}, normal);

  check_grads("relu", [](const std::vector<Tensor>& v) {
    return weighted_sum(relu(v[0]), 17);
  }, {{4, 6}}, nonzero);

  check_grads("silu", [](const std::vector<Tensor>& v) {
    return weighted_sum(silu(v[0]), 18);
  }, {{4, 6}}, normal);

  check_grads("sigmoid", [](const std::vector<Tensor>& v) {
    return weighted_sum(sigmoid(v[0]), 19);
  }, {{4, 6}}, normal);

  check_grads("softclamp01", [](const std::vector<Tensor>& v) {
    return weighted_sum(softclamp01(v[0]), 20);
  }, {{4, 6}}, normal);

  check_grads("matmul", [](const std::vector<Tensor>& v) {
    return weighted_sum(matmul(v[0], v[1]), 21);
  }, {{3, 4}, {4, 5}}, normal);

  check_grads("linear", [](const std::vector<Tensor>& v) {
    return weighted_sum(linear(v[0], v[1], v[2]), 22);
  }, {{5, 4}, {4}, {5}}, normal);

  check_grads("conv2d", [](const std::vector<Tensor>& v) {
    return weighted_sum(conv2d(v[0], v[1], v[2], 1, 1), 23);
  }, {{2, 6, 6}, {3, 2, 3, 3}, {3}}, normal, 60);

  check_grads("conv2d stride 2", [](const std::vector<Tensor>& v) {
    return weighted_sum(conv2d(v[0], v[1], v[2], 2, 1), 24);
  }, {{2, 6, 6}, {3, 2, 3, 3}, {3}}, normal, 60);

  check_grads("group_norm", [](const std::vector<Tensor>& v) {
    return weighted_sum(group_norm(v[0], 2, v[1], v[2]), 25);
  }, {{4, 3, 3}, {4}, {4}}, normal, 100, 1e-3, 2e-3);

  check_grads("bias_channel", [](const std::vector<Tensor>& v) {
    return weighted_sum(bias_channel(v[0], v[1]), 26);
  }, {{3, 4, 4}, {3}}, normal);

  check_grads("mean_all", [](const std::vector<Tensor>& v) { return mean_all(v[0]); },
              {{3, 4}}, normal);
  check_grads("sum_all", [](const std::vector<Tensor>& v) { return sum_all(v[0]); },
              {{3, 4}}, normal);
  check_grads("sumsq", [](const std::vector<Tensor>& v) { return sumsq(v[0]); },
              {{3, 4}}, normal);
  check_grads("dot", [](const std::vector<Tensor>& v) { return dot(v[0], v[1]); },
              {{10}, {10}}, normal);

  check_grads("cosine", [](const std::vector<Tensor>& v) { return cosine(v[0], v[1]); },
              {{10}, {10}}, [](const Shape& s, Philox& rng) {
                return add_scalar(mul_scalar(rand_tensor(s, rng), 0.5), 1.0).detach();
              });

  check_grads("l2_normalize", [](const std::vector<Tensor>& v) {
    return weighted_sum(l2_normalize(v[0]), 27);
  }, {{8}}, normal);

  check_grads("softmax_channel", [](const std::vector<Tensor>& v) {
    return weighted_sum(softmax_channel(v[0]), 28);
  }, {{4, 3, 3}}, normal);

  check_grads("cross_entropy_logits", [](const std::vector<Tensor>& v) {
    return cross_entropy_logits(v[0], 2);
  }, {{7}}, normal);

  check_grads("seg_cross_entropy_logits", [](const std::vector<Tensor>& v) {
    std::vector<uint8_t> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
    return seg_cross_entropy_logits(v[0], labels);
  }, {{3, 4, 4}}, normal);

  check_grads("upsample_nearest", [](const std::vector<Tensor>& v) {
    return weighted_sum(upsample_nearest(v[0], 2), 29);
  }, {{2, 3, 3}}, normal);

  check_grads("downsample_area", [](const std::vector<Tensor>& v) {
    return weighted_sum(downsample_area(v[0], 2), 30);
  }, {{2, 4, 4}}, normal);

  check_grads("concat_ch", [](const std::vector<Tensor>& v) {
    return weighted_sum(concat_ch(v[0], v[1]), 31);
  }, {{2, 3, 3}, {3, 3, 3}}, normal);

  check_grads("slice_ch", [](const std::vector<Tensor>& v) {
    return weighted_sum(slice_ch(v[0], 1, 4), 32);
  }, {{5, 3, 3}}, normal);

  check_grads("reshape", [](const std::vector<Tensor>& v) {
    return weighted_sum(reshape(v[0], {3, 4}), 33);
  }, {{2, 6}}, normal);
}

TEST_CASE("backward is linear in the loss") {
  Philox rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_tensor({5, 5}, rng);
    double a = rng.uniform() * 4 - 2, b = rng.uniform() * 4 - 2;

    auto f = [](const Tensor& t) { return sumsq(t); };
    auto g = [](const Tensor& t) { return mean_all(silu(t)); };

    Tensor xf = x.clone_as_leaf(true);
    backward(f(xf));
    Tensor xg = x.clone_as_leaf(true);
    backward(g(xg));
    Tensor xc = x.clone_as_leaf(true);
    backward(add(mul_scalar(f(xc), a), mul_scalar(g(xc), b)));

    for (int64_t i = 0; i < x.numel(); ++i) {
      double want = a * xf.grad()[i] + b * xg.grad()[i];
      CHECK(std::abs(xc.grad()[i] - want) < 1e-6 * std::max(1.0, std::abs(want)) + 1e-6);
    }
  }
}

TEST_CASE("diamond graphs accumulate through shared nodes exactly once") {
  // y = sum(h) + sumsq(h) with h = 2x shared; dy/dx = 2 + 8x
  Tensor x = Tensor::from({3}, {1.0f, -0.5f, 2.0f}, true);
  Tensor h = mul_scalar(x, 2.0);
  backward(add(sum_all(h), sumsq(h)));
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 + 8.0 * x.at(i)).epsilon(1e-5));
}

TEST_CASE("error paths") {
  Philox rng(7);
  Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({3, 2}, rng);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), Error);
  CHECK_THROWS_WITH_AS(conv2d(a, b, Tensor(), 1, 1), doctest::Contains("conv2d"), Error);

  Tensor w = rand_tensor({4, 3, 3, 3}, rng);
  Tensor img = rand_tensor({2, 5, 5}, rng);
  try {
    conv2d(img, w, Tensor(), 1, 1);
    FAIL("expected shape error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("conv2d") != std::string::npos);
    CHECK(msg.find("[2,5,5]") != std::string::npos);
    CHECK(msg.find("[4,3,3,3]") != std::string::npos);
  }

  // backward wants a scalar with a recorded graph
  Tensor x = rand_tensor({4}, rng).clone_as_leaf(true);
  CHECK_THROWS_AS(backward(mul_scalar(x, 2.0)), Error);  // non-scalar
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0f)), Error);  // detached
  Tensor loss = sumsq(x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), Error);  // graph consumed
}

TEST_CASE("no-grad mode records nothing") {
  Philox rng(8);
  Tensor x = rand_tensor({4}, rng).clone_as_leaf(true);
  NoGradGuard ng;
  Tensor y = sumsq(x);
  CHECK_FALSE(y.requires_grad());
  CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("grad accumulates across backward calls on a shared leaf") {
  Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
  backward(sum_all(x));
  backward(sum_all(x));
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  x.clear_grad();
  backward(sum_all(x));
  CHECK(x.grad()[0] == doctest::Approx(1.0f));
}

TEST_CASE("independent graphs are thread-safe and deterministic") {
  auto job = [](uint64_t seed) {
    Philox rng(seed);
    Tensor x = rand_tensor({4, 8, 8}, rng).clone_as_leaf(true);
    Tensor w = rand_tensor({4, 4, 3, 3}, rng);
    backward(sumsq(conv2d(silu(x), w, Tensor(), 1, 1)));
    return x.grad();
  };
  std::vector<float> serial1 = job(101), serial2 = job(202);
  std::vector<float> t1, t2;
  std::thread a([&] { t1 = job(101); });
  std::thread b([&] { t2 = job(202); });
  a.join();
  b.join();
  CHECK(t1 == serial1);
  CHECK(t2 == serial2);
}

TEST_CASE("non-finite detection") {
  Tensor bad = Tensor::from({2}, {1.0f, std::numeric_limits<float>::infinity()});
  CHECK_FALSE(bad.all_finite());
  CHECK_THROWS_AS(bad.check_finite("test"), Error);
}
