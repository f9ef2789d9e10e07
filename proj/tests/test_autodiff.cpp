#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "genci/autodiff.hpp"
#include "genci/rng.hpp"

#include <cmath>
#include <functional>

using namespace genci;
namespace ad = genci::ad;

namespace {

Mat random_mat(Index r, Index c, Rng& rng, Real scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

using GraphFn = std::function<ad::VarId(ad::Tape&)>;

Real eval_scalar(const ad::ParamStore& ps, const GraphFn& fn) {
  ad::Tape t(&ps, nullptr, false);
  ad::VarId root = fn(t);
  REQUIRE(t.value(root).size() == 1);
  return t.value(root)(0, 0);
}

// Central differences against every element of every parameter.
void check_grads(ad::ParamStore& ps, const GraphFn& fn, Real tol = 1e-6) {
  ad::GradStore gs(ps);
  ad::Tape tape(&ps, &gs);
  tape.backward(fn(tape));
  const Real h = 1e-5;
  for (int pid = 0; pid < static_cast<int>(ps.size()); ++pid) {
    Mat& v = ps.value(pid);
    for (Index i = 0; i < v.size(); ++i) {
      const Real orig = v(i);
      v(i) = orig + h;
      const Real fp = eval_scalar(ps, fn);
      v(i) = orig - h;
      const Real fm = eval_scalar(ps, fn);
      v(i) = orig;
      const Real fd = (fp - fm) / (2 * h);
      const Real an = gs.grad(pid)(i);
      const Real err = std::abs(fd - an) / (1.0 + std::max(std::abs(fd), std::abs(an)));
      INFO("param " << ps.name(pid) << " elem " << i << " fd " << fd << " ad " << an);
      CHECK(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise arithmetic gradients") {
  Rng rng(substream(11, "t1"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(3, 4, rng));
  int b = ps.add("b", random_mat(3, 4, rng));
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId va = t.param(a), vb = t.param(b);
    ad::VarId u = ad::sub(t, ad::cmul(t, va, vb), ad::scale(t, ad::add(t, va, vb), 0.3));
    return ad::mean_all(t, ad::square(t, u));
  });
}

TEST_CASE("gelu and sigmoid gradients") {
  Rng rng(substream(12, "t2"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(2, 5, rng, 0.8));
  int b = ps.add("b", random_mat(2, 5, rng, 0.8));
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId u = ad::cmul(t, ad::gelu(t, t.param(a)), ad::sigmoid(t, t.param(b)));
    return ad::mean_all(t, u);
  });
}

TEST_CASE("sigmoid value is stable at extremes") {
  ad::ParamStore ps;
  Mat z(1, 3);
  z << -800.0, 0.0, 800.0;
  ad::Tape t(&ps, nullptr, false);
  Mat s = t.value(ad::sigmoid(t, t.input(z)));
  CHECK(s(0, 0) == 0.0);
  CHECK(s(0, 1) == 0.5);
  CHECK(s(0, 2) == 1.0);
}

TEST_CASE("matmul gradients and values") {
  Rng rng(substream(13, "t3"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(2, 3, rng));
  int b = ps.add("b", random_mat(3, 4, rng));
  int c = ps.add("c", random_mat(4, 3, rng));

  {
    ad::Tape t(&ps, nullptr, false);
    Mat m1 = t.value(ad::matmul(t, t.param(a), t.param(b)));
    CHECK((m1 - ps.value(a) * ps.value(b)).norm() == 0.0);
    Mat m2 = t.value(ad::matmul_nt(t, t.param(a), t.param(c)));
    CHECK((m2 - ps.value(a) * ps.value(c).transpose()).norm() == 0.0);
  }

  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId p = ad::matmul(t, t.param(a), t.param(b));  // 2x4
    ad::VarId q = ad::matmul_nt(t, t.param(a), t.param(c));
    return ad::mean_all(t, ad::square(t, ad::add(t, p, q)));
  });
}

TEST_CASE("stacking and slicing gradients") {
  Rng rng(substream(14, "t4"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(2, 2, rng));
  int b = ps.add("b", random_mat(2, 3, rng));
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId h = ad::hstack(t, {t.param(a), t.param(b)});  // 2x5
    ad::VarId v = ad::vstack(t, {h, ad::scale(t, h, -1.0)});  // 4x5
    ad::VarId s = ad::slice_cols(t, v, 1, 3);
    ad::VarId r = ad::row(t, v, 2);
    return ad::add(t, ad::mean_all(t, ad::square(t, s)), ad::sum_all(t, ad::square(t, r)));
  });
}

TEST_CASE("gather_rows accumulates over repeated indices") {
  Rng rng(substream(15, "t5"));
  ad::ParamStore ps;
  int tab = ps.add("table", random_mat(5, 3, rng));
  std::vector<Index> idx = {0, 2, 2, 4, 0, 2};
  check_grads(ps, [&](ad::Tape& t) {
    return ad::mean_all(t, ad::square(t, ad::gather_rows(t, t.param(tab), idx)));
  });
  // Row 1 and 3 are never gathered; their gradient must stay zero.
  ad::GradStore gs(ps);
  ad::Tape t(&ps, &gs);
  t.backward(ad::mean_all(t, ad::square(t, ad::gather_rows(t, t.param(tab), idx))));
  CHECK(gs.grad(tab).row(1).norm() == 0.0);
  CHECK(gs.grad(tab).row(3).norm() == 0.0);
  CHECK(gs.grad(tab).row(2).norm() > 0.0);
}

TEST_CASE("add_rowvec broadcast gradients") {
  Rng rng(substream(16, "t6"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(3, 4, rng));
  int r = ps.add("r", random_mat(1, 4, rng));
  check_grads(ps, [&](ad::Tape& t) {
    return ad::mean_all(t, ad::square(t, ad::add_rowvec(t, t.param(a), t.param(r))));
  });
}

TEST_CASE("reduction gradients") {
  Rng rng(substream(17, "t7"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(3, 4, rng));
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId rs = ad::rowsum(t, ad::square(t, t.param(a)));  // 3x1
    return ad::add(t, ad::scale(t, ad::sum_all(t, ad::square(t, rs)), 0.25),
                   ad::mean_all(t, t.param(a)));
  });
}

TEST_CASE("rmsnorm gradients and row scale") {
  Rng rng(substream(18, "t8"));
  ad::ParamStore ps;
  int x = ps.add("x", random_mat(3, 5, rng));
  Mat g0 = Mat::Ones(1, 5) + 0.1 * random_mat(1, 5, rng);
  int g = ps.add("g", g0);
  int w = ps.add("w", random_mat(3, 5, rng));
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId y = ad::rmsnorm_rows(t, t.param(x), t.param(g));
    return ad::mean_all(t, ad::cmul(t, y, t.param(w)));
  });

  // With unit gain every output row has RMS 1 up to eps.
  ad::ParamStore ps2;
  int x2 = ps2.add("x", 3.0 * random_mat(4, 8, rng));
  int g2 = ps2.add("g", Mat::Ones(1, 8));
  ad::Tape t(&ps2, nullptr, false);
  Mat y = t.value(ad::rmsnorm_rows(t, t.param(x2), t.param(g2)));
  for (Index i = 0; i < y.rows(); ++i) {
    Real rms = std::sqrt(y.row(i).squaredNorm() / 8.0);
    CHECK(rms == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("masked softmax values") {
  Rng rng(substream(19, "t9"));
  ad::ParamStore ps;
  Mat s = random_mat(4, 6, rng);
  std::vector<std::uint8_t> valid = {1, 0, 1, 1, 0, 1};
  ad::Tape t(&ps, nullptr, false);
  Mat p = t.value(ad::softmax_rows(t, t.input(s), valid));
  for (Index i = 0; i < 4; ++i) {
    CHECK(p(i, 1) == 0.0);
    CHECK(p(i, 4) == 0.0);
    CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Causal restriction zeroes the upper triangle.
  Mat sq = random_mat(4, 4, rng);
  Mat pc = t.value(ad::softmax_rows(t, t.input(sq), {}, true, 0));
  for (Index i = 0; i < 4; ++i)
    for (Index j = i + 1; j < 4; ++j) CHECK(pc(i, j) == 0.0);
}

TEST_CASE("masked softmax gradients") {
  Rng rng(substream(20, "t10"));
  ad::ParamStore ps;
  int s = ps.add("s", random_mat(3, 5, rng));
  Mat wmat = random_mat(3, 5, rng);
  std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1};
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId p = ad::softmax_rows(t, t.param(s), valid);
    return ad::mean_all(t, ad::cmul(t, p, t.input(wmat)));
  });
  check_grads(ps, [&](ad::Tape& t) {
    ad::VarId p = ad::softmax_rows(t, t.param(s), {}, true, 1);
    return ad::mean_all(t, ad::cmul(t, p, t.input(wmat)));
  });
}

TEST_CASE("softmax rejects a fully masked row") {
  ad::ParamStore ps;
  ad::Tape t(&ps, nullptr, false);
  Mat s = Mat::Zero(2, 3);
  std::vector<std::uint8_t> none = {0, 0, 0};
  CHECK_THROWS_AS(ad::softmax_rows(t, t.input(s), none), std::invalid_argument);
}

TEST_CASE("dropout masks deterministically under a fixed stream") {
  Rng rng(substream(21, "t11"));
  ad::ParamStore ps;
  int a = ps.add("a", random_mat(4, 6, rng));
  const Real p = 0.5;
  auto fn = [&](ad::Tape& t) {
    Rng drop(substream(99, "drop"));
    return ad::mean_all(t, ad::square(t, ad::dropout(t, t.param(a), p, drop)));
  };
  check_grads(ps, fn);

  // Kept entries are scaled by 1/(1-p); dropped entries are exactly zero.
  ad::Tape t(&ps, nullptr, false);
  Rng drop(substream(99, "drop"));
  Mat y = t.value(ad::dropout(t, t.param(a), p, drop));
  int zeros = 0;
  for (Index i = 0; i < y.size(); ++i) {
    if (y(i) == 0.0) {
      ++zeros;
    } else {
      CHECK(y(i) == doctest::Approx(ps.value(a)(i) * 2.0).epsilon(1e-12));
    }
  }
  CHECK(zeros > 0);
  CHECK(zeros < y.size());

  // p = 0 is the identity.
  ad::Tape t2(&ps, nullptr, false);
  ad::VarId va = t2.param(a);
  CHECK(ad::dropout(t2, va, 0.0, drop) == va);
}

TEST_CASE("cross entropy value and gradients") {
  Rng rng(substream(22, "t12"));
  ad::ParamStore ps;
  int z = ps.add("z", random_mat(4, 7, rng));
  std::vector<int> targets = {1, 0, 6, 3};

  ad::Tape t(&ps, nullptr, false);
  Real got = t.value(ad::cross_entropy_rows(t, t.param(z), targets))(0, 0);
  Real want = 0;
  for (Index i = 0; i < 4; ++i) {
    const auto& row = ps.value(z).row(i);
    Real mx = row.maxCoeff();
    Real lse = mx + std::log((row.array() - mx).exp().sum());
    want += lse - row(targets[static_cast<std::size_t>(i)]);
  }
  want /= 4.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  check_grads(ps, [&](ad::Tape& t) {
    return ad::cross_entropy_rows(t, t.param(z), targets);
  });
}

TEST_CASE("bce with logits value and gradients") {
  Rng rng(substream(23, "t13"));
  ad::ParamStore ps;
  int z = ps.add("z", random_mat(5, 1, rng, 2.0));
  Vec labels(5);
  labels << 0, 1, 1, 0, 1;

  ad::Tape t(&ps, nullptr, false);
  Real got = t.value(ad::bce_with_logits_sum(t, t.param(z), labels))(0, 0);
  Real want = 0;
  for (Index i = 0; i < 5; ++i) {
    Real zi = ps.value(z)(i, 0);
    Real p = 1.0 / (1.0 + std::exp(-zi));
    want += -(labels(i) * std::log(p) + (1.0 - labels(i)) * std::log(1.0 - p));
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-9));

  check_grads(ps, [&](ad::Tape& t) {
    return ad::bce_with_logits_sum(t, t.param(z), labels);
  });

  // Large magnitude logits must not overflow.
  ad::ParamStore ps2;
  int z2 = ps2.add("z", Mat::Constant(1, 1, -900.0));
  Vec one(1);
  one << 1.0;
  ad::Tape t2(&ps2, nullptr, false);
  Real big = t2.value(ad::bce_with_logits_sum(t2, t2.param(z2), one))(0, 0);
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(900.0).epsilon(1e-12));
}

TEST_CASE("parameter reuse accumulates gradients") {
  ad::ParamStore ps;
  Mat a0(2, 2);
  a0 << 1.0, -2.0, 0.5, 3.0;
  int a = ps.add("a", a0);
  ad::GradStore gs(ps);
  ad::Tape t(&ps, &gs);
  ad::VarId va = t.param(a);
  CHECK(t.param(a) == va);  // memoized leaf
  ad::VarId loss = ad::add(t, ad::sum_all(t, ad::cmul(t, va, va)), ad::sum_all(t, va));
  t.backward(loss);
  Mat want = 2.0 * a0 + Mat::Ones(2, 2);
  CHECK((gs.grad(a) - want).norm() == doctest::Approx(0.0));
}

TEST_CASE("gradstore reset and accumulate") {
  ad::ParamStore ps;
  ps.add("a", Mat::Ones(2, 2));
  ad::GradStore g1(ps), g2(ps);
  g1.grad(0).setConstant(1.5);
  g2.grad(0).setConstant(2.0);
  g1.accumulate(g2);
  CHECK(g1.grad(0)(0, 0) == 3.5);
  g1.reset();
  CHECK(g1.grad(0).norm() == 0.0);
}

TEST_CASE("no-grad tape refuses backward") {
  ad::ParamStore ps;
  ps.add("a", Mat::Ones(1, 1));
  ad::Tape t(&ps, nullptr, false);
  ad::VarId v = ad::sum_all(t, t.param(0));
  CHECK_THROWS_AS(t.backward(v), std::logic_error);
}

TEST_CASE("backward requires a scalar root") {
  ad::ParamStore ps;
  ps.add("a", Mat::Ones(2, 2));
  ad::GradStore gs(ps);
  ad::Tape t(&ps, &gs);
  CHECK_THROWS_AS(t.backward(t.param(0)), std::invalid_argument);
}
