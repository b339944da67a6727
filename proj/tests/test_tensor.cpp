// Tensor and op tests. Forward values are checked against independent
// re-implementations (triple loops, sliding windows, div/mod indexing);
// backward passes are checked against central finite differences.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "sttree/sttree.hpp"

using namespace sttree;

namespace {

Tensor randn(Shape s, SplitMix64& rng, bool rg = true) {
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  t.set_requires_grad(rg);
  return t;
}

// Right-aligned broadcast lookup via plain div/mod coordinate math. The
// library walks an odometer instead, so agreement is meaningful.
double bcast_at(const Tensor& t, const Shape& os, std::size_t flat) {
  std::vector<std::size_t> coord(os.size());
  std::size_t rem = flat;
  for (std::size_t i = os.size(); i-- > 0;) {
    coord[i] = rem % os[i];
    rem /= os[i];
  }
  const Shape& ts = t.shape();
  const std::size_t off = os.size() - ts.size();
  std::size_t idx = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const std::size_t c = ts[i] == 1 ? 0 : coord[off + i];
    idx = idx * ts[i] + c;
  }
  return t.values()[idx];
}

}  // namespace

TEST_CASE("tensor shape validation and storage-sharing views", "[tensor]") {
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}, std::vector<double>{1.0, 2.0}).item(), ShapeError);

  Tensor a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(a.rank() == 2);
  CHECK(a.size() == 6);
  CHECK(a.dim(1) == 3);

  Tensor v = a.reshape({3, 2});
  v.data()[5] = 42.0;
  CHECK(a.values()[5] == 42.0);  // same bytes, not a copy
  a.set_requires_grad(true);
  v.grad()[2] = 7.0;
  CHECK(a.grad_vec()[2] == 7.0);
  CHECK_THROWS_AS(a.reshape({4, 2}), ShapeError);
}

TEST_CASE("elementwise arithmetic broadcasts like a coordinate oracle", "[tensor]") {
  SplitMix64 rng(11);
  Tensor a = randn({2, 1, 3}, rng, false);
  Tensor b = randn({4, 1}, rng, false);
  const Shape os{2, 4, 3};

  struct Case {
    Tensor r;
    std::function<double(double, double)> f;
  };
  const std::vector<Case> cases = {
      {add(a, b), [](double x, double y) { return x + y; }},
      {sub(a, b), [](double x, double y) { return x - y; }},
      {mul(a, b), [](double x, double y) { return x * y; }},
      {div(a, b), [](double x, double y) { return x / y; }},
  };
  for (const Case& c : cases) {
    REQUIRE(c.r.shape() == os);
    for (std::size_t i = 0; i < c.r.size(); ++i)
      CHECK(c.r.values()[i] == Catch::Approx(c.f(bcast_at(a, os, i), bcast_at(b, os, i)))
                                   .margin(1e-14));
  }
  CHECK_THROWS_AS(add(Tensor({2, 3}, 1.0), Tensor({4}, 1.0)), ShapeError);
}

TEST_CASE("matmul and bmm match triple-loop oracles", "[tensor]") {
  SplitMix64 rng(12);
  Tensor a = randn({3, 4}, rng, false);
  Tensor b = randn({4, 5}, rng, false);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 5});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.values()[i * 4 + k] * b.values()[k * 5 + j];
      CHECK(c.values()[i * 5 + j] == Catch::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS_AS(matmul(Tensor({3, 4}, 1.0), Tensor({5, 2}, 1.0)), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor({2, 3, 4}, 1.0), Tensor({4, 2}, 1.0)), ShapeError);

  Tensor ba = randn({3, 2, 4}, rng, false);
  Tensor bb = randn({3, 4, 2}, rng, false);
  Tensor bc = bmm(ba, bb);
  REQUIRE(bc.shape() == Shape{3, 2, 2});
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 4; ++k)
          acc += ba.values()[(g * 2 + i) * 4 + k] * bb.values()[(g * 4 + k) * 2 + j];
        CHECK(bc.values()[(g * 2 + i) * 2 + j] == Catch::Approx(acc).epsilon(1e-12));
      }
  CHECK_THROWS_AS(bmm(Tensor({2, 2, 4}, 1.0), Tensor({3, 4, 2}, 1.0)), ShapeError);
}

TEST_CASE("conv1d matches a sliding-window oracle in both padding modes", "[tensor]") {
  Tensor x({1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  Tensor w({1, 1, 2}, std::vector<double>{1, 1});
  Tensor y = conv1d(x, w, Pad::valid);
  REQUIRE(y.shape() == Shape{1, 1, 3});
  CHECK(y.values() == std::vector<double>{3, 5, 7});

  SplitMix64 rng(13);
  const std::size_t B = 2, C = 3, L = 9, F = 4;
  Tensor xr = randn({B, C, L}, rng, false);
  for (std::size_t K : {std::size_t{3}, std::size_t{4}}) {
    Tensor wr = randn({F, C, K}, rng, false);
    for (Pad pad : {Pad::valid, Pad::same}) {
      const std::size_t left = pad == Pad::same ? (K - 1) / 2 : 0;
      const std::size_t Lout = pad == Pad::same ? L : L - K + 1;
      Tensor yr = conv1d(xr, wr, pad);
      REQUIRE(yr.shape() == Shape{B, F, Lout});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t t = 0; t < Lout; ++t) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t k = 0; k < K; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                           static_cast<std::ptrdiff_t>(left);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;  // zero pad
                acc += xr.values()[(b * C + c) * L + src] * wr.values()[(f * C + c) * K + k];
              }
            CHECK(yr.values()[(b * F + f) * Lout + t] == Catch::Approx(acc).margin(1e-12));
          }
    }
  }
  CHECK_THROWS_AS(conv1d(Tensor({1, 1, 3}, 1.0), Tensor({1, 1, 5}, 1.0), Pad::valid), ShapeError);
  CHECK_THROWS_AS(conv1d(Tensor({1, 2, 4}, 1.0), Tensor({1, 3, 2}, 1.0)), ShapeError);
}

TEST_CASE("pooling matches scan oracles and routes gradients correctly", "[tensor]") {
  SplitMix64 rng(14);
  Tensor x = randn({2, 3, 7}, rng, false);

  Tensor gm = maxpool1d(x);  // window 0 means the whole length
  REQUIRE(gm.shape() == Shape{2, 3, 1});
  Tensor ga = avgpool1d(x);
  for (std::size_t bc = 0; bc < 6; ++bc) {
    double mx = x.values()[bc * 7];
    double sum = 0.0;
    for (std::size_t t = 0; t < 7; ++t) {
      mx = std::max(mx, x.values()[bc * 7 + t]);
      sum += x.values()[bc * 7 + t];
    }
    CHECK(gm.values()[bc] == mx);
    CHECK(ga.values()[bc] == Catch::Approx(sum / 7.0).epsilon(1e-12));
  }

  // Window 3 over length 7: two full windows plus a tail of one.
  Tensor wm = maxpool1d(x, 3);
  Tensor wa = avgpool1d(x, 3);
  REQUIRE(wm.shape() == Shape{2, 3, 3});
  for (std::size_t bc = 0; bc < 6; ++bc)
    for (std::size_t o = 0; o < 3; ++o) {
      const std::size_t lo = o * 3, hi = std::min<std::size_t>(lo + 3, 7);
      double mx = x.values()[bc * 7 + lo], sum = 0.0;
      for (std::size_t t = lo; t < hi; ++t) {
        mx = std::max(mx, x.values()[bc * 7 + t]);
        sum += x.values()[bc * 7 + t];
      }
      CHECK(wm.values()[bc * 3 + o] == mx);
      CHECK(wa.values()[bc * 3 + o] == Catch::Approx(sum / (hi - lo)).epsilon(1e-12));
    }
  CHECK_THROWS_AS(maxpool1d(x, 8), ShapeError);

  // Pooling is generic over the last axis; rank 2 works too.
  Tensor flat = maxpool1d(Tensor({3, 4}, 1.0));
  CHECK(flat.shape() == Shape{3, 1});
  CHECK(flat.values() == std::vector<double>{1.0, 1.0, 1.0});

  // Max gradient goes to the first maximum only; ties must not double-count.
  Tensor tie({1, 1, 3}, std::vector<double>{1.0, 3.0, 3.0});
  tie.set_requires_grad(true);
  Tape tape;
  Tape::active()->backward(sum_all(maxpool1d(tie)));
  CHECK(tie.grad_vec() == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("softmax produces stable distributions", "[tensor]") {
  Tensor big({2, 2}, std::vector<double>{1000.0, 1001.0, -1000.0, -1001.0});
  Tensor s = softmax(big, 1);
  for (std::size_t r = 0; r < 2; ++r) {
    const double row = s.values()[r * 2] + s.values()[r * 2 + 1];
    CHECK(row == Catch::Approx(1.0).margin(1e-12));
  }
  CHECK(s.values()[0] == Catch::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-12));

  // Shift invariance: softmax(x + c) == softmax(x).
  Tensor a({1, 3}, std::vector<double>{0.3, -1.2, 0.9});
  Tensor b({1, 3}, std::vector<double>{100.3, 98.8, 100.9});
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(softmax(a, 1).values()[i] == Catch::Approx(softmax(b, 1).values()[i]).margin(1e-12));

  // Works along a leading axis too.
  Tensor m({2, 2}, std::vector<double>{0.0, 1.0, 1.0, 0.0});
  Tensor s0 = softmax(m, 0);
  CHECK(s0.values()[0] + s0.values()[2] == Catch::Approx(1.0).margin(1e-12));
  CHECK(s0.values()[0] == Catch::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-12));

  Tensor bad({1, 2}, std::vector<double>{0.0, std::nan("")});
  CHECK_THROWS_AS(softmax(bad, 1), NumericError);
}

TEST_CASE("reductions, transpose, slice, concat, roll and argmax", "[tensor]") {
  Tensor x({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor s1 = sum_axis(x, 1);
  REQUIRE(s1.shape() == Shape{2});
  CHECK(s1.values() == std::vector<double>{6, 15});
  Tensor s0 = sum_axis(x, 0, true);
  REQUIRE(s0.shape() == Shape{1, 3});
  CHECK(s0.values() == std::vector<double>{5, 7, 9});
  CHECK(mean_axis(x, 1).values() == std::vector<double>{2, 5});
  CHECK(sum_all(x).item() == 21.0);

  Tensor t = transpose_last2(x);
  REQUIRE(t.shape() == Shape{3, 2});
  CHECK(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
  CHECK(transpose_last2(t).values() == x.values());

  Tensor sl = slice(x, 1, 1, 2);
  REQUIRE(sl.shape() == Shape{2, 2});
  CHECK(sl.values() == std::vector<double>{2, 3, 5, 6});
  CHECK_THROWS_AS(slice(x, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(slice(x, 5, 0, 1), ShapeError);

  Tensor c = concat({x, sl}, 1);
  REQUIRE(c.shape() == Shape{2, 5});
  CHECK(c.values() == std::vector<double>{1, 2, 3, 2, 3, 4, 5, 6, 5, 6});
  CHECK_THROWS_AS(concat({x, Tensor({3, 3}, 1.0)}, 1), ShapeError);

  Tensor r({1, 5}, std::vector<double>{1, 2, 3, 4, 5});
  CHECK(roll(r, 2, 1).values() == std::vector<double>{4, 5, 1, 2, 3});
  CHECK(roll(r, -2, 1).values() == std::vector<double>{3, 4, 5, 1, 2});
  CHECK(roll(roll(r, 3, 1), -3, 1).values() == r.values());
  CHECK(roll(r, 7, 1).values() == roll(r, 2, 1).values());  // shifts wrap

  Tensor am({2, 3}, std::vector<double>{1, 9, 9, 5, 2, 5});
  const std::vector<std::size_t> idx = argmax_last(am);
  CHECK(idx == std::vector<std::size_t>{1, 0});  // first max wins
}

TEST_CASE("unary ops: values, domains and kink subgradients", "[tensor]") {
  Tensor z = Tensor::scalar(0.0);
  CHECK(sigmoid(z).item() == 0.5);
  CHECK(one_minus(Tensor::scalar(0.3)).item() == Catch::Approx(0.7).margin(1e-15));
  CHECK(add_scalar(Tensor::scalar(2.0), 0.5).item() == 2.5);
  CHECK(mul_scalar(Tensor::scalar(2.0), -3.0).item() == -6.0);
  CHECK(relu(Tensor({3}, std::vector<double>{-1, 0, 2})).values() ==
        std::vector<double>{0, 0, 2});

  CHECK_THROWS_AS(log(Tensor::scalar(0.0)), ValueError);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), ValueError);
  CHECK_THROWS_AS(sqrt(Tensor::scalar(-1e-9)), ValueError);

  // sqrt at exactly zero must not emit an infinite gradient.
  Tensor sz = Tensor::scalar(0.0);
  sz.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum_all(sqrt(sz)));
  }
  CHECK(sz.grad_vec()[0] == 0.0);

  // clamp passes gradient strictly inside the interval only.
  Tensor cx({3}, std::vector<double>{-2.0, 0.5, 2.0});
  cx.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum_all(clamp(cx, -1.0, 1.0)));
  }
  CHECK(cx.grad_vec() == std::vector<double>{0.0, 1.0, 0.0});
  CHECK(clamp(Tensor({3}, std::vector<double>{-2.0, 0.5, 2.0}), -1.0, 1.0).values() ==
        std::vector<double>{-1.0, 0.5, 1.0});
}

TEST_CASE("layer_norm standardizes the trailing axis", "[tensor]") {
  Tensor g({2}, std::vector<double>{1, 1});
  Tensor b({2}, std::vector<double>{0, 0});
  Tensor x({1, 2}, std::vector<double>{1.0, -1.0});
  Tensor y = layer_norm(x, g, b);
  // mean 0, population var 1, eps 1e-5: 1/sqrt(1 + 1e-5).
  CHECK(y.values()[0] == Catch::Approx(0.99999500003750).epsilon(1e-10));
  CHECK(y.values()[1] == Catch::Approx(-0.99999500003750).epsilon(1e-10));

  SplitMix64 rng(15);
  Tensor g4({4}, 1.0), b4({4}, 0.0);
  Tensor xr = randn({3, 5, 4}, rng, false);
  Tensor yr = layer_norm(xr, g4, b4);
  for (std::size_t row = 0; row < 15; ++row) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 4; ++i) mean += yr.values()[row * 4 + i];
    mean /= 4.0;
    for (std::size_t i = 0; i < 4; ++i)
      var += (yr.values()[row * 4 + i] - mean) * (yr.values()[row * 4 + i] - mean);
    CHECK(mean == Catch::Approx(0.0).margin(1e-12));
    CHECK(var / 4.0 == Catch::Approx(1.0).margin(1e-3));  // eps shrinks it slightly
  }
}

TEST_CASE("linear applies the weight to the trailing axis at any rank", "[tensor]") {
  SplitMix64 rng(16);
  Tensor x = randn({2, 3, 4}, rng, false);
  Tensor w = randn({4, 5}, rng, false);
  Tensor b = randn({5}, rng, false);
  Tensor y = linear(x, w, b);
  REQUIRE(y.shape() == Shape{2, 3, 5});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = b.values()[j];
      for (std::size_t k = 0; k < 4; ++k) acc += x.values()[r * 4 + k] * w.values()[k * 5 + j];
      CHECK(y.values()[r * 5 + j] == Catch::Approx(acc).margin(1e-12));
    }
}

TEST_CASE("reverse mode agrees with central differences across the op set", "[tensor]") {
  SplitMix64 rng(17);
  Tensor a = randn({2, 3, 8}, rng);
  Tensor kern = randn({2, 3, 3}, rng);
  Tensor g({4}, 1.0, true), bb({4}, 0.0, true);
  Tensor w2 = randn({4, 3}, rng);
  Tensor w3 = randn({3, 3}, rng);
  Tensor b3 = randn({3}, rng);
  Tensor brow = randn({4}, rng);

  // One graph touching every differentiable primitive.
  const auto make_loss = [&] {
    Tensor c = conv1d(a, kern, Pad::same);            // [2,2,8]
    Tensor p = maxpool1d(c, 3);                       // [2,2,3]
    Tensor q = avgpool1d(c, 3);                       // [2,2,3]
    Tensor u = mul(sigmoid(p), add_scalar(relu(q), 0.1));
    Tensor v = div(u, add_scalar(sigmoid(u), 1.0));
    Tensor lg = log(add_scalar(sigmoid(v), 0.5));
    Tensor sq = sqrt(add_scalar(mul(v, v), 1e-3));
    Tensor cat = concat({lg, sq}, 2);                 // [2,2,6]
    Tensor ro = roll(cat, 2, 2);
    Tensor sl = slice(ro, 2, 1, 4);                   // [2,2,4]
    Tensor tr = transpose_last2(sl);                  // [2,4,2]
    Tensor bm = bmm(tr, sl);                          // [2,4,4]
    Tensor sm = softmax(bm, 2);
    Tensor ln = layer_norm(sm, g, bb);
    Tensor red = add(mean_axis(ln, 1), brow);         // [2,4] + [4] broadcast
    Tensor mm = matmul(red, w2);                      // [2,3]
    Tensor li = linear(mm, w3, b3);
    Tensor out = mul_scalar(one_minus(clamp(li, -50.0, 50.0)), 0.5);
    return sum_all(mul(out, out));
  };

  const std::vector<NamedParam> params = {{"a", a},   {"kern", kern}, {"g", g},
                                          {"b", bb},  {"w2", w2},     {"w3", w3},
                                          {"b3", b3}, {"brow", brow}};
  const GradCheckResult res = finite_difference_check(params, make_loss);
  INFO("worst " << res.worst_param << "[" << res.worst_index << "]");
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("leaf gradients accumulate until cleared; intermediates reset", "[tensor]") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = mul(x, x);
  Tensor loss = sum_all(y);
  tape.backward(loss);
  CHECK(x.grad_vec()[0] == Catch::Approx(6.0));
  CHECK(y.grad_vec()[0] == Catch::Approx(1.0));
  tape.backward(loss);
  CHECK(x.grad_vec()[0] == Catch::Approx(12.0));  // leaf accumulated
  CHECK(y.grad_vec()[0] == Catch::Approx(1.0));   // intermediate re-zeroed first
  x.zero_grad();
  CHECK(x.grad_vec()[0] == 0.0);

  CHECK_THROWS_AS(tape.backward(Tensor({2}, 1.0)), ShapeError);
}

TEST_CASE("nothing is recorded without a tape or tracked inputs", "[tensor]") {
  Tensor x = Tensor::scalar(2.0);  // requires_grad defaults to false
  {
    Tape tape;
    Tensor y = mul(x, x);
    CHECK(tape.node_count() == 0);
    x.set_requires_grad(true);
    Tensor z = mul(x, x);
    CHECK(tape.node_count() == 1);
  }
  // No active tape at all: ops still compute values.
  Tensor w = add(x, x);
  CHECK(w.item() == 4.0);
}
