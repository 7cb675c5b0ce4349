#include <cmath>
#include <functional>
#include <string>

#include "test_util.hpp"
#include "vitkd/grad_check.hpp"
#include "vitkd/ops.hpp"

using namespace vitkd;
using vitkd::test::bitwise_equal;
using vitkd::test::check_close;
using vitkd::test::random_tensor;

TEST_CASE("matmul examples") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  check_close(matmul(eye, m), {1, 2, 3, 4});
  check_close(matmul(m, Tensor({2, 1}, {5, 6})), {17, 39});
  Tensor any = Tensor({2, 3}, {1, -2, 3, 4, 5, -6});
  check_close(matmul(Tensor::zeros({4, 2}), any), std::vector<float>(12, 0.0f));
}

TEST_CASE("matmul shape error names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3]", msg.find("[2x3]") + 1) != std::string::npos);
  }
}

TEST_CASE("matmul agrees with a naive triple loop on ragged shapes") {
  Rng rng(11);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {7, 5, 3}, {13, 300, 37}, {6, 64, 32}, {65, 17, 49}}) {
    Tensor a = random_tensor({std::size_t(m), std::size_t(k)}, rng);
    Tensor b = random_tensor({std::size_t(k), std::size_t(n)}, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int p = 0; p < k; ++p) s += double(a.data()[i * k + p]) * b.data()[p * n + j];
        CHECK(std::abs(c.data()[i * n + j] - s) <= 1e-4 * (1 + std::abs(s)));
      }
    }
  }
}

TEST_CASE("softmax examples") {
  check_close(softmax_rows(Tensor({1, 2}, {0, 0})), {0.5f, 0.5f});
  check_close(softmax_rows(Tensor({1, 2}, {std::log(3.0f), 0})), {0.75f, 0.25f});
  Rng rng(3);
  Tensor x = random_tensor({3, 5}, rng, -4, 4);
  Tensor shifted = x.clone();
  for (auto& v : shifted.data()) v += 2.5f;
  check_close(softmax_rows(shifted), vitkd::test::values(softmax_rows(x)), 1e-6);
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(4);
  Tensor y = softmax_rows(random_tensor({6, 4, 9}, rng, -10, 10));
  for (std::size_t r = 0; r < 24; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      const float v = y.data()[r * 9 + j];
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-5);
  }
}

TEST_CASE("layer norm examples") {
  check_close(layer_norm(Tensor({1, 3}, {5, 5, 5}), Tensor::ones({3}), Tensor::zeros({3})), {0, 0, 0});
  check_close(layer_norm(Tensor({1, 2}, {1, -1}), Tensor::ones({2}), Tensor::zeros({2}), 0.0f), {1, -1});
  Tensor beta({3}, {0.5f, -1.0f, 2.0f});
  check_close(layer_norm(Tensor({2, 3}, {1, 2, 3, -4, 0, 9}), Tensor::zeros({3}), beta),
              {0.5f, -1.0f, 2.0f, 0.5f, -1.0f, 2.0f});
}

TEST_CASE("conv3x3 examples") {
  Rng rng(5);
  Tensor x = random_tensor({1, 5, 6}, rng);
  Tensor identity({1, 1, 3, 3});
  identity.data()[4] = 1.0f;
  CHECK(bitwise_equal(conv3x3(x, identity, Tensor::zeros({1})), x));

  Tensor ones = conv3x3(Tensor::ones({1, 5, 5}), Tensor::ones({1, 1, 3, 3}), Tensor());
  CHECK(ones.at({0, 2, 2}) == 9.0f);
  CHECK(ones.at({0, 0, 0}) == 4.0f);

  Tensor bias({2}, {0.25f, -3.0f});
  Tensor out = conv3x3(random_tensor({3, 4, 4}, rng), Tensor::zeros({2, 3, 3, 3}), bias);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(out.data()[i] == 0.25f);
    CHECK(out.data()[16 + i] == -3.0f);
  }
}

TEST_CASE("backward examples") {
  Rng rng(6);
  Tensor x = random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));

  Tensor a = random_tensor({2, 2}, rng).set_requires_grad(true);
  Tensor unused = random_tensor({2, 2}, rng).set_requires_grad(true);
  backward(sum(a));
  CHECK_FALSE(unused.has_grad());

  CHECK_THROWS_AS(backward(mul(a, a)), ContractError);
  Tape::current().clear();
}

TEST_CASE("backward clears the tape") {
  Tensor x = Tensor::ones({2}).set_requires_grad(true);
  Tensor loss = sum(scale(x, 3.0f));
  CHECK(Tape::current().size() > 0);
  backward(loss);
  CHECK(Tape::current().size() == 0);
}

TEST_CASE("matmul chain gradient matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({5, 2}, rng);
  auto r = grad_check("chain", [&] { return sum(matmul(matmul(a, b), c)); }, {{"a", a}, {"b", b}, {"c", c}});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("grad_check of a sum of squares passes at 1e-4") {
  Rng rng(8);
  Tensor x = random_tensor({10}, rng);
  GradCheckOptions opt;
  opt.tolerance = 1e-4;
  // Central differences are exact on a quadratic; a wider step only cuts the
  // f32 rounding in the two evaluations.
  opt.step = 1e-2f;
  auto r = grad_check("sumsq", [&] { return sum(mul(x, x)); }, {{"x", x}}, opt);
  CHECK(r.passed);
  CHECK(r.elements_checked == 10);
}

namespace {

// x² with a wrong derivative of 3x.
Tensor broken_square(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
  if (autograd::should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi] {
      auto& g = autograd::grad_of(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * 3.0f * xi->data[i];
    });
  }
  return out;
}

}  // namespace

TEST_CASE("grad_check catches a corrupted backward rule") {
  Rng rng(9);
  Tensor x = random_tensor({6}, rng, 0.5f, 1.0f);
  auto r = grad_check("broken", [&] { return sum(broken_square(x)); }, {{"x", x}});
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error > 0.1);
  CHECK(r.worst_input == "x");
}

TEST_CASE("every op passes a finite-difference check") {
  Rng rng(10);
  auto check = [](const std::string& name, const std::function<Tensor()>& f, std::vector<GradCheckInput> in) {
    auto r = grad_check(name, f, in);
    INFO(name, " rel error ", r.max_rel_error, " at ", r.worst_input, "[", r.worst_index, "]");
    CHECK(r.passed);
  };
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng);
  Tensor bias = random_tensor({5}, rng), r5 = random_tensor({3, 5}, rng), r4 = random_tensor({3, 4}, rng);
  Tensor gamma0 = random_tensor({4}, rng);
  check("add", [&] { return sum(mul(add(a, b), r4)); }, {{"a", a}, {"b", b}});
  check("sub", [&] { return sum(mul(sub(a, b), r4)); }, {{"a", a}, {"b", b}});
  check("mul", [&] { return sum(mul(a, b)); }, {{"a", a}, {"b", b}});
  check("scale", [&] { return sum(mul(scale(a, -1.5f), r4)); }, {{"a", a}});
  check("add_broadcast", [&] { return sum(mul(add_broadcast(a, gamma0.clone()), r4)); }, {{"a", a}});
  check("linear", [&] { return sum(mul(linear(a, w, bias), r5)); }, {{"a", a}, {"w", w}, {"bias", bias}});
  check("relu", [&] { return sum(mul(relu(a), r4)); }, {{"a", a}});
  check("gelu", [&] { return sum(mul(gelu(a), r4)); }, {{"a", a}});
  Tensor gamma = random_tensor({4}, rng), beta = random_tensor({4}, rng);
  check("layer_norm", [&] { return sum(mul(layer_norm(a, gamma, beta), r4)); },
        {{"x", a}, {"gamma", gamma}, {"beta", beta}});
  check("softmax", [&] { return sum(mul(softmax_rows(a), r4)); }, {{"a", a}});
  std::vector<std::uint8_t> allowed{1, 0, 1, 1, 1, 1, 0, 1};
  Tensor s = random_tensor({2, 3, 4}, rng), rs = random_tensor({2, 3, 4}, rng);
  check("masked_softmax", [&] { return sum(mul(masked_softmax_rows(s, allowed, 1), rs)); }, {{"s", s}});
  Tensor g1 = random_tensor({2, 3, 4}, rng), g2 = random_tensor({2, 4, 5}, rng), g3 = random_tensor({2, 5, 4}, rng);
  Tensor rg = random_tensor({2, 3, 5}, rng);
  check("batched_matmul", [&] { return sum(mul(batched_matmul(g1, g2), rg)); }, {{"a", g1}, {"b", g2}});
  check("batched_matmul_t", [&] { return sum(mul(batched_matmul(g1, g3, true), rg)); }, {{"a", g1}, {"b", g3}});
  Tensor rt = random_tensor({2, 4, 3}, rng);
  check("transpose", [&] { return sum(mul(transpose_last2(g1), rt)); }, {{"x", g1}});
  Tensor h = random_tensor({2, 3, 4}, rng);
  check("heads", [&] { return sum(mul(merge_heads(scale(split_heads(h, 2), 2.0f), 2), rs)); }, {{"h", h}});
  Tensor tok = random_tensor({4}, rng), rp = random_tensor({2, 4, 4}, rng);
  check("prepend_token", [&] { return sum(mul(prepend_token(h, tok), rp)); }, {{"h", h}, {"tok", tok}});
  Tensor rsl = random_tensor({2, 2, 4}, rng);
  check("slice_tokens", [&] { return sum(mul(slice_tokens(h, 1, 2), rsl)); }, {{"h", h}});
  std::vector<std::uint8_t> rows{1, 0, 0, 1, 1, 0};
  check("replace_rows", [&] { return sum(mul(replace_rows(h, rows, tok), rs)); }, {{"h", h}, {"tok", tok}});
  Tensor h2 = random_tensor({2, 3, 4}, rng);
  check("select_rows", [&] { return sum(mul(select_rows(rows, h, h2), rs)); }, {{"h", h}, {"h2", h2}});
  Tensor img = random_tensor({2, 3, 4, 4}, rng), k = random_tensor({2, 3, 3, 3}, rng), kb = random_tensor({2}, rng);
  Tensor rc = random_tensor({2, 2, 4, 4}, rng);
  check("conv3x3", [&] { return sum(mul(conv3x3(img, k, kb), rc)); }, {{"x", img}, {"k", k}, {"b", kb}});
  check("mean", [&] { return mean(mul(a, a)); }, {{"a", a}});
  Tensor rr = random_tensor({4, 3}, rng);
  check("reshape", [&] { return sum(mul(reshape(a, {4, 3}), rr)); }, {{"a", a}});
  std::vector<float> wts{1, 0, 2};
  check("squared_error", [&] { return squared_error(a, b, wts); }, {{"a", a}});
  std::vector<int> labels{0, 3, 1};
  check("cross_entropy", [&] { return cross_entropy(a, labels, 0.1f); }, {{"a", a}});
  check("kd", [&] { return kd_kl_divergence(a, b, 2.0f); }, {{"a", a}});
}

TEST_CASE("gradients accumulate across shared inputs and separate backwards") {
  Rng rng(12);
  Tensor x = random_tensor({4, 3}, rng), w = random_tensor({3, 3}, rng);
  auto l1 = [&] { return sum(mul(matmul(x, w), matmul(x, w))); };
  auto l2 = [&] { return sum(gelu(x)); };

  x.set_requires_grad(true);
  backward(add(l1(), l2()));
  std::vector<float> joint(x.grad().begin(), x.grad().end());

  x.zero_grad();
  backward(l1());
  backward(l2());
  for (std::size_t i = 0; i < joint.size(); ++i) CHECK(std::abs(x.grad()[i] - joint[i]) <= 1e-6);

  // x used twice in one graph.
  Tensor y = random_tensor({5}, rng).set_requires_grad(true);
  backward(sum(add(y, y)));
  for (auto g : y.grad()) CHECK(g == 2.0f);
}

TEST_CASE("ops are bitwise deterministic") {
  Rng rng(13);
  Tensor a = random_tensor({2, 17, 40}, rng), w = random_tensor({40, 33}, rng);
  Tensor r1 = softmax_rows(gelu(linear(a, w, Tensor())));
  Tensor r2 = softmax_rows(gelu(linear(a, w, Tensor())));
  CHECK(bitwise_equal(r1, r2));
}

TEST_CASE("NoGradGuard stops recording") {
  Tensor x = Tensor::ones({3}).set_requires_grad(true);
  Tape::current().clear();
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape::current().size() == 0);
}

TEST_CASE("masked softmax rejects a slice without keys") {
  std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(masked_softmax_rows(Tensor::zeros({1, 2, 3}), none, 1), DegenerateAttentionError);
}

TEST_CASE("Rng streams are reproducible") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    const float u = c.uniform();
    CHECK(u >= 0.0f);
    CHECK(u < 1.0f);
  }
  Rng f1 = Rng(5).fork(1), f2 = Rng(5).fork(2);
  CHECK(f1.next() != f2.next());
}
