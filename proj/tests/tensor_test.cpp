#include <cmath>
#include <cstring>

#include "doctest.h"
#include "test_util.hpp"

using namespace dps;

TEST_CASE("matmul basics") {
  // identity * M == M
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = matmul(eye, m);
  CHECK(max_abs_diff(r, m) == 0.0);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor v = Tensor::from({2, 1}, {1, 1});
  Tensor p = matmul(a, v);
  CHECK(p.values()[0] == doctest::Approx(3.0));
  CHECK(p.values()[1] == doctest::Approx(7.0));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), std::invalid_argument);
}

TEST_CASE("matmul matches triple-loop oracle") {
  CounterRng rng(11);
  Tensor a = rand_tensor({5, 7}, rng);
  Tensor b = rand_tensor({7, 3}, rng);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 7; ++k) acc += a.values()[i * 7 + k] * b.values()[k * 3 + j];
      CHECK(std::abs(c.values()[i * 3 + j] - acc) < 1e-12);
    }
}

TEST_CASE("matmul gradients vs finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CounterRng rng(seed);
    Tensor a = rand_tensor({4, 5}, rng);
    Tensor b = rand_tensor({5, 3}, rng);
    auto res = check_gradients("matmul", {a, b}, [&](const std::vector<Tensor>& v) {
      Tensor out = matmul(v[0], v[1]);
      return sum_all(mul(out, projection_for(out, seed)));
    });
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("softmax values") {
  Tensor u = Tensor::full({6}, 3.25);
  Tensor s = softmax(u, 0);
  for (auto v : s.values()) CHECK(v == doctest::Approx(1.0 / 6).epsilon(1e-14));

  Tensor x = Tensor::from({2}, {0.0, std::log(3.0)});
  Tensor y = softmax(x, 0);
  CHECK(y.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  CounterRng rng(5);
  Tensor x = rand_tensor({4, 9}, rng, -3, 3);
  Tensor y = softmax(x, 1);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += y.values()[i * 9 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  Tensor shifted = affine(x, 1.0, 17.5);
  Tensor y2 = softmax(shifted, 1);
  CHECK(max_abs_diff(y, y2) < 1e-12);
}

TEST_CASE("softmax gradient vs finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CounterRng rng(seed * 31);
    Tensor x = rand_tensor({7}, rng);
    auto res = check_gradients("softmax", {x}, [&](const std::vector<Tensor>& v) {
      Tensor out = softmax(v[0], 0);
      return sum_all(mul(out, projection_for(out, seed)));
    });
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("activation values") {
  Tensor z = Tensor::scalar(0.0);
  CHECK(sigmoid(z).item() == doctest::Approx(0.5));
  CHECK(tanh_act(z).item() == doctest::Approx(0.0));
  CHECK(gelu(z).item() == doctest::Approx(0.0));

  Tensor big = Tensor::from({2}, {50.0, -50.0});
  Tensor t = tanh_act(big);
  CHECK(t.values()[0] < 1.0);
  CHECK(t.values()[0] > 0.999);
  CHECK(t.values()[1] > -1.0);
  CHECK(t.values()[1] < -0.999);
}

TEST_CASE("activation gradients vs finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CounterRng rng(seed * 77);
    Tensor x = rand_tensor({11}, rng, -2, 2);
    for (Act kind : {Act::Sigmoid, Act::Tanh, Act::Gelu}) {
      auto res = check_gradients("act", {x}, [&](const std::vector<Tensor>& v) {
        Tensor out = activation(kind, v[0]);
        return sum_all(mul(out, projection_for(out, seed)));
      });
      CHECK(res.max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("reduce values") {
  Tensor c = Tensor::full({3, 4, 5}, 2.5);
  CHECK(mean_all(c).item() == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(sum_all(c).item() == doctest::Approx(2.5 * 60).epsilon(1e-14));

  Tensor x = Tensor::from({2, 3}, {1, 5, 2, 7, 0, 3});
  Tensor mx = reduce_max(x, {1});
  CHECK(mx.values()[0] == 5.0);
  CHECK(mx.values()[1] == 7.0);
  Tensor sm = reduce_sum(x, {0});
  CHECK(sm.values()[0] == 8.0);
  CHECK(sm.values()[1] == 5.0);
  CHECK(sm.values()[2] == 5.0);
}

TEST_CASE("reduce gradients vs finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CounterRng rng(seed * 13);
    Tensor x = rand_tensor({3, 4, 2}, rng);
    for (Reduce kind : {Reduce::Sum, Reduce::Mean, Reduce::Max}) {
      auto res = check_gradients("reduce", {x}, [&](const std::vector<Tensor>& v) {
        Tensor out = reduce(kind, v[0], {1});
        return sum_all(mul(out, projection_for(out, seed)));
      });
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("broadcast add/mul/div") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({1, 3}, {10, 20, 30});
  Tensor s = add(a, b);
  CHECK(s.values() == std::vector<real>{11, 22, 33, 14, 25, 36});
  Tensor col = Tensor::from({2, 1}, {2, 3});
  Tensor m = mul(a, col);
  CHECK(m.values() == std::vector<real>{2, 4, 6, 12, 15, 18});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})), std::invalid_argument);

  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CounterRng rng(seed * 19);
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor y = rand_tensor({3, 1}, rng, 0.5, 2.0);
    for (auto op : {0, 1, 2, 3}) {
      auto res = check_gradients("binop", {x, y}, [&](const std::vector<Tensor>& v) {
        Tensor out = op == 0   ? add(v[0], v[1])
                     : op == 1 ? sub(v[0], v[1])
                     : op == 2 ? mul(v[0], v[1])
                               : div(v[0], v[1]);
        return sum_all(mul(out, projection_for(out, seed)));
      });
      CHECK(res.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("concat then split round-trips") {
  CounterRng rng(23);
  Tensor a = rand_tensor({2, 3, 4}, rng);
  Tensor b = rand_tensor({2, 2, 4}, rng);
  Tensor cat = concat({a, b}, 1);
  CHECK(cat.shape() == Shape{2, 5, 4});
  Tensor a2 = slice(cat, 1, 0, 3);
  Tensor b2 = slice(cat, 1, 3, 2);
  CHECK(max_abs_diff(a, a2) == 0.0);
  CHECK(max_abs_diff(b, b2) == 0.0);

  auto res = check_gradients("concat", {a, b}, [&](const std::vector<Tensor>& v) {
    Tensor out = concat({v[0], v[1]}, 1);
    return sum_all(mul(out, projection_for(out, 23)));
  });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("reshape and permute") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = reshape(x, {3, 2});
  CHECK(r.values() == x.values());
  Tensor t = transpose(x);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.values() == std::vector<real>{1, 4, 2, 5, 3, 6});

  CounterRng rng(3);
  Tensor y = rand_tensor({2, 3, 4}, rng);
  Tensor p = permute(y, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 4; ++c)
        CHECK(p.values()[(c * 2 + a) * 3 + b] == y.values()[(a * 3 + b) * 4 + c]);

  auto res = check_gradients("permute", {y}, [&](const std::vector<Tensor>& v) {
    Tensor out = permute(v[0], {2, 0, 1});
    return sum_all(mul(out, projection_for(out, 3)));
  });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("backward on simple graphs") {
  CounterRng rng(41);
  Tensor x = rand_tensor({3, 4}, rng);
  {
    Tape tape;
    Tensor xl = x.shared_value_leaf();
    tape.watch(xl);
    Tensor loss = sum_all(xl);
    tape.backward(loss);
    for (auto g : xl.grad()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    Tensor xl = x.shared_value_leaf();
    tape.watch(xl);
    Tensor loss = sum_all(mul(xl, xl));
    tape.backward(loss);
    for (std::size_t i = 0; i < xl.grad().size(); ++i)
      CHECK(xl.grad()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward rejects multi-element loss") {
  Tape tape;
  Tensor x = Tensor::zeros({3});
  tape.watch(x);
  Tensor y = affine(x, 2.0, 0.0);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("constants never receive gradients, unreachable params stay zero") {
  CounterRng rng(9);
  Tensor c = rand_tensor({4}, rng);
  Tape tape;
  Tensor p = rand_tensor({4}, rng);
  Tensor q = rand_tensor({4}, rng);
  tape.watch(p);
  tape.watch(q);
  Tensor loss = sum_all(mul(p, c));  // q unused
  tape.backward(loss);
  CHECK(!c.grad_enabled());
  for (auto g : q.grad()) CHECK(g == 0.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.grad()[i] == c.values()[i]);
}

TEST_CASE("composite graph gradient vs finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CounterRng rng(seed * 101);
    Tensor x = rand_tensor({2, 6, 6}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b = rand_tensor({3}, rng, -0.1, 0.1);
    auto res = check_gradients("conv-softmax-mean", {x, w, b},
                               [&](const std::vector<Tensor>& v) {
                                 Tensor y = conv2d(v[0], v[1], v[2], 1, 1, 1);
                                 Tensor s = softmax(reshape(y, {3, 36}), 1);
                                 return mean_all(s) + sum_all(mul(s, projection_for(s, seed)));
                               });
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("determinism: identical seed gives bit-identical forward and backward") {
  auto run = [](std::uint64_t seed) {
    CounterRng rng(seed);
    Tensor x = rand_tensor({2, 5, 5}, rng);
    Tensor w = rand_tensor({2, 2, 3, 3}, rng);
    Tensor b = rand_tensor({2}, rng);
    Tape tape;
    Tensor xl = x.shared_value_leaf();
    tape.watch(xl);
    Tensor y = conv2d(xl, w, b, 1, 1, 1);
    Tensor loss = mean_all(mul(y, y));
    tape.backward(loss);
    return std::pair<std::vector<real>, std::vector<real>>(y.values(), xl.grad());
  };
  auto [f1, g1] = run(2024);
  auto [f2, g2] = run(2024);
  CHECK(std::memcmp(f1.data(), f2.data(), f1.size() * sizeof(real)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(real)) == 0);
}

TEST_CASE("clamp and log gradients") {
  CounterRng rng(55);
  Tensor x = rand_tensor({9}, rng, 0.05, 0.95);
  auto res = check_gradients("clamped-log", {x}, [&](const std::vector<Tensor>& v) {
    Tensor c = clamp(v[0], 1e-7, 1.0 - 1e-7);
    return sum_all(log(c));
  });
  CHECK(res.max_rel_err < 1e-6);
}
