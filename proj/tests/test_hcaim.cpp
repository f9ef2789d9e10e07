#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "genci/hcaim.hpp"

#include <cmath>

using namespace genci;

namespace {

struct Fixture {
  GenConfig gcfg;
  ad::ParamStore ps;
  HcaimModel model;
  int item_emb = -1;
  int tok_emb = -1;
  std::map<std::string, Index> rows;
  SemanticIDTable table;
  CohortIndex index;

  explicit Fixture(Index heads, std::uint64_t seed = 50) : model(make_model(ps, heads, seed)) {
    gcfg.levels = 3;
    gcfg.codebook_size = 4;
    gcfg.collision_capacity = 2;
    gcfg.d_model = 6;

    Rng data = substream(seed, "data");
    Mat items(5, 4);
    for (Index i = 0; i < items.size(); ++i) items(i) = data.normal();
    item_emb = ps.add("item_emb", items);
    Mat toks(gcfg.vocab(), 6);
    for (Index i = 0; i < toks.size(); ++i) toks(i) = data.normal();
    tok_emb = ps.add("tok_emb", toks);

    const char* names[] = {"a", "b", "c", "d", "e"};
    std::vector<std::vector<int>> levels = {
        {0, 0, 0}, {0, 1, 0}, {1, 0, 1}, {1, 1, 2}, {0, 2, 3}};
    for (int i = 0; i < 5; ++i) {
      rows[names[i]] = i;
      SemanticID id{levels[static_cast<std::size_t>(i)], 0};
      table.by_id[id.full()] = names[i];
      table.by_item.emplace(names[i], std::move(id));
    }
    table.levels = 3;
    table.codebook_size = 4;
    table.collision_capacity = 1;
    index = build_cohort_index(table);
  }

  static HcaimModel make_model(ad::ParamStore& ps, Index heads, std::uint64_t seed) {
    Rng rng = substream(seed, "hcaim");
    return HcaimModel::create(ps, 4, 6, heads, rng);
  }

  ItemEmbeddingRef items_ref() const { return {item_emb, &rows}; }
  FallbackRef fallback_ref() const { return {tok_emb, &gcfg}; }

  Mat P(const char* name) const { return ps.value(ps.find(name)); }
};

Mat softmax_rows_value(const Mat& s) {
  Mat p(s.rows(), s.cols());
  for (Index i = 0; i < s.rows(); ++i) {
    Real mx = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

TEST_CASE("cohort pooling means member embeddings per level") {
  Fixture f(1);
  ad::Tape t(&f.ps, nullptr, false);

  // Levels 0 and 1 contribute; the last codebook level never does.
  SemanticID predicted{{0, 2, 1}, 0};
  auto pool = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                   f.fallback_ref(), {64, 9, false});
  const Mat e_c = t.value(pool.e_c);
  REQUIRE(e_c.rows() == 2);
  REQUIRE(e_c.cols() == 4);
  CHECK(pool.fallback_levels == 0);
  CHECK(pool.member_counts == std::vector<Index>{3, 1});

  const Mat& items = f.ps.value(f.item_emb);
  // Level 0 cohort of code 0 is {a, b, e}; direct sum oracle.
  Mat want0 = (items.row(0) + items.row(1) + items.row(4)) / 3.0;
  CHECK((e_c.row(0) - want0).norm() < 1e-12);
  // Level 1 cohort of code 2 is the singleton {e}.
  CHECK((e_c.row(1) - items.row(4)).norm() == 0.0);
}

TEST_CASE("opposed pair pools to zero and counts stay per level") {
  Fixture f(1);
  Mat& items = f.ps.value(f.item_emb);
  items.row(3) = -items.row(2);  // cohort {c, d} at level 0 code 1

  ad::Tape t(&f.ps, nullptr, false);
  SemanticID predicted{{1, 1, 0}, 0};
  auto pool = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                   f.fallback_ref(), {64, 9, false});
  CHECK(t.value(pool.e_c).row(0).norm() < 1e-15);
  CHECK(pool.member_counts == std::vector<Index>{2, 2});
}

TEST_CASE("oversized cohorts sample deterministically") {
  Fixture f(1);
  SemanticID predicted{{0, 0, 0}, 0};
  CohortConfig cfg{2, 123, false};

  ad::Tape t(&f.ps, nullptr, false);
  auto a = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                f.fallback_ref(), cfg);
  auto b = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                f.fallback_ref(), cfg);
  CHECK(a.member_counts == std::vector<Index>{2, 2});
  CHECK((t.value(a.e_c) - t.value(b.e_c)).norm() == 0.0);

  // The sampled mean is a mean of two member embeddings.
  const Mat& items = f.ps.value(f.item_emb);
  const Mat got = t.value(a.e_c).row(0);
  bool matches_some_pair = false;
  for (int i : {0, 1, 4}) {
    for (int j : {0, 1, 4}) {
      if (i == j) continue;
      if ((got - (items.row(i) + items.row(j)) / 2.0).norm() < 1e-12) matches_some_pair = true;
    }
  }
  CHECK(matches_some_pair);

  CHECK_THROWS_AS(f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                       f.fallback_ref(), {0, 1, false}),
                  std::invalid_argument);
}

TEST_CASE("member order does not change the pooled mean") {
  Fixture f(1);
  CohortIndex shuffled = f.index;
  auto& members = shuffled.cohorts[0][0];
  REQUIRE(members.size() == 3);
  std::swap(members[0], members[2]);

  ad::Tape t(&f.ps, nullptr, false);
  SemanticID predicted{{0, 0, 0}, 0};
  auto a = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                f.fallback_ref(), {64, 9, false});
  auto b = f.model.pool_cohorts(t, predicted, f.table, shuffled, f.items_ref(),
                                f.fallback_ref(), {64, 9, false});
  CHECK((t.value(a.e_c) - t.value(b.e_c)).norm() < 1e-15);
}

TEST_CASE("empty cohorts fall back to the projected codeword embedding") {
  Fixture f(1);
  ad::Tape t(&f.ps, nullptr, false);
  SemanticID predicted{{2, 0, 0}, 0};  // no item uses code 2 at level 0
  auto pool = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                   f.fallback_ref(), {64, 9, false});
  CHECK(pool.fallback_levels == 1);
  CHECK(pool.member_counts == std::vector<Index>{0, 2});

  Mat want = f.ps.value(f.tok_emb).row(f.gcfg.level_token(0, 2)) * f.P("hcaim.fallback.w");
  CHECK((t.value(pool.e_c).row(0) - want.row(0)).norm() < 1e-14);
}

TEST_CASE("prefix cohorts require every leading level to match") {
  Fixture f(1);
  ad::Tape t(&f.ps, nullptr, false);
  SemanticID predicted{{0, 0, 0}, 0};
  auto pool = f.model.pool_cohorts(t, predicted, f.table, f.index, f.items_ref(),
                                   f.fallback_ref(), {64, 9, true});
  // Prefix (0) -> {a, b, e}; prefix (0,0) -> {a} alone.
  CHECK(pool.member_counts == std::vector<Index>{3, 1});
  const Mat& items = f.ps.value(f.item_emb);
  CHECK((t.value(pool.e_c).row(1) - items.row(0)).norm() == 0.0);
}

TEST_CASE("refinement matches a hand computed single head oracle") {
  Fixture f(1);
  Rng data = substream(51, "oracle");
  Mat e_c(2, 4), h_enc(3, 6);
  for (Index i = 0; i < e_c.size(); ++i) e_c(i) = data.normal();
  for (Index i = 0; i < h_enc.size(); ++i) h_enc(i) = data.normal();

  ad::Tape t(&f.ps, nullptr, false);
  ad::VarId er = f.model.refine_intent(t, t.input(e_c), t.input(h_enc), {1, 1, 1});

  Mat q = e_c * f.P("hcaim.refine.q.w");
  Mat k = h_enc * f.P("hcaim.refine.k.w");
  Mat v = h_enc * f.P("hcaim.refine.v.w");
  Mat p = softmax_rows_value(q * k.transpose() / 2.0);  // sqrt(d) = 2
  CHECK((t.value(er) - p * v).norm() < 1e-12);

  // Every weight row is a distribution.
  for (Index i = 0; i < p.rows(); ++i) {
    CHECK(p.row(i).minCoeff() >= 0.0);
    CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("a single valid key pins refinement to its value projection") {
  Fixture f(1);
  Rng data = substream(52, "oracle");
  Mat e_c(2, 4), h_enc(3, 6);
  for (Index i = 0; i < e_c.size(); ++i) e_c(i) = data.normal();
  for (Index i = 0; i < h_enc.size(); ++i) h_enc(i) = data.normal();

  ad::Tape t(&f.ps, nullptr, false);
  ad::VarId er = f.model.refine_intent(t, t.input(e_c), t.input(h_enc), {0, 1, 0});
  Mat v = h_enc * f.P("hcaim.refine.v.w");
  for (Index i = 0; i < 2; ++i) {
    CHECK((t.value(er).row(i) - v.row(1)).norm() < 1e-12);
  }

  // Perturbing masked encoder rows changes nothing.
  Mat poked = h_enc;
  poked.row(0).setConstant(77.0);
  poked.row(2).setConstant(-77.0);
  ad::VarId er2 = f.model.refine_intent(t, t.input(e_c), t.input(poked), {0, 1, 0});
  CHECK((t.value(er) - t.value(er2)).norm() == 0.0);

  CHECK_THROWS_AS(f.model.refine_intent(t, t.input(e_c), t.input(h_enc), {0, 0, 0}),
                  std::invalid_argument);
}

TEST_CASE("target attention follows the two key closed form") {
  Fixture f(1);
  Rng data = substream(53, "oracle");
  Mat e_v(1, 4), e_r(2, 4);
  for (Index i = 0; i < e_v.size(); ++i) e_v(i) = data.normal();
  for (Index i = 0; i < e_r.size(); ++i) e_r(i) = data.normal();

  ad::Tape t(&f.ps, nullptr, false);
  ad::VarId sti = f.model.target_attend(t, t.input(e_v), t.input(e_r));

  Mat q = e_v * f.P("hcaim.target.q.w");
  Mat k = e_r * f.P("hcaim.target.k.w");
  Mat v = e_r * f.P("hcaim.target.v.w");
  Mat p = softmax_rows_value(q * k.transpose() / 2.0);
  CHECK((t.value(sti) - p * v).norm() < 1e-12);

  // One key reduces to its value projection.
  ad::VarId one = f.model.target_attend(t, t.input(e_v), t.input(Mat(e_r.topRows(1))));
  CHECK((t.value(one) - (e_r.topRows(1) * f.P("hcaim.target.v.w"))).norm() < 1e-12);

  // A zero query spreads the weights uniformly. Parameter leaves are
  // memoized per tape, so the edit needs a fresh one.
  f.ps.value(f.ps.find("hcaim.target.q.w")).setZero();
  ad::Tape t2(&f.ps, nullptr, false);
  ad::VarId flat = f.model.target_attend(t2, t2.input(e_v), t2.input(e_r));
  Mat mean_v = (v.row(0) + v.row(1)) / 2.0;
  CHECK((t2.value(flat) - mean_v).norm() < 1e-12);
}

TEST_CASE("aggregate modes compose the primitives") {
  Fixture f(1);
  Rng data = substream(54, "oracle");
  Mat e_c(2, 4), h_enc(3, 6), e_v(1, 4);
  for (Index i = 0; i < e_c.size(); ++i) e_c(i) = data.normal();
  for (Index i = 0; i < h_enc.size(); ++i) h_enc(i) = data.normal();
  for (Index i = 0; i < e_v.size(); ++i) e_v(i) = data.normal();
  std::vector<std::uint8_t> mask{1, 1, 1};

  ad::Tape t(&f.ps, nullptr, false);
  ad::VarId c = t.input(e_c), h = t.input(h_enc), v = t.input(e_v);

  ad::VarId hier = f.model.aggregate_intent(t, IntentMode::hierarchical, c, h, mask, v);
  ad::VarId composed = f.model.target_attend(t, v, f.model.refine_intent(t, c, h, mask));
  CHECK((t.value(hier) - t.value(composed)).norm() == 0.0);

  ad::VarId ti = f.model.aggregate_intent(t, IntentMode::target_intent, c, h, mask, v);
  CHECK((t.value(ti) - t.value(f.model.target_attend(t, v, c))).norm() == 0.0);

  // intent_mean of identical rows is the projection of that row.
  Mat samey(2, 4);
  samey.row(0) = e_c.row(0);
  samey.row(1) = e_c.row(0);
  ad::VarId im = f.model.aggregate_intent(t, IntentMode::intent_mean, t.input(samey), h, mask, v);
  CHECK((t.value(im) - e_c.row(0) * f.P("hcaim.mean.w")).norm() < 1e-12);

  CHECK(parse_intent_mode("hierarchical") == IntentMode::hierarchical);
  CHECK(to_string(IntentMode::intent_mean) == "intent_mean");
  CHECK_THROWS_AS(parse_intent_mode("nope"), std::invalid_argument);
}

TEST_CASE("two head outputs stay in the convex hull per head") {
  Fixture f(2);
  Rng data = substream(55, "oracle");
  Mat e_c(3, 4), h_enc(5, 6);
  for (Index i = 0; i < e_c.size(); ++i) e_c(i) = data.normal();
  for (Index i = 0; i < h_enc.size(); ++i) h_enc(i) = data.normal();
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};

  ad::Tape t(&f.ps, nullptr, false);
  ad::VarId er = f.model.refine_intent(t, t.input(e_c), t.input(h_enc), mask);

  Mat q = e_c * f.P("hcaim.refine.q.w");
  Mat k = h_enc * f.P("hcaim.refine.k.w");
  Mat v = h_enc * f.P("hcaim.refine.v.w");
  Mat got = t.value(er);
  for (Index h = 0; h < 2; ++h) {
    Mat qh = q.middleCols(h * 2, 2), kh = k.middleCols(h * 2, 2), vh = v.middleCols(h * 2, 2);
    Mat scores = qh * kh.transpose() / std::sqrt(2.0);
    for (Index i = 0; i < scores.rows(); ++i) {
      Real denom = 0, mx = -1e300;
      for (Index j = 0; j < 5; ++j) {
        if (mask[static_cast<std::size_t>(j)]) mx = std::max(mx, scores(i, j));
      }
      Vec w = Vec::Zero(5);
      for (Index j = 0; j < 5; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        w(j) = std::exp(scores(i, j) - mx);
        denom += w(j);
      }
      w /= denom;
      CHECK(w.minCoeff() >= 0.0);
      CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-6));
      Mat rec = w.transpose() * vh;
      CHECK((got.block(i, h * 2, 1, 2) - rec).norm() < 1e-10);
    }
  }
}

TEST_CASE("intent gradients match finite differences") {
  Fixture f(2);
  Rng data = substream(56, "oracle");
  Mat e_c(2, 4), h_enc(3, 6);
  for (Index i = 0; i < e_c.size(); ++i) e_c(i) = data.normal();
  for (Index i = 0; i < h_enc.size(); ++i) h_enc(i) = data.normal();
  std::vector<std::uint8_t> mask{1, 1, 0};

  auto graph = [&](ad::Tape& t) {
    ad::VarId e_v = ad::gather_rows(t, t.param(f.item_emb), {0});
    ad::VarId sti = f.model.aggregate_intent(t, IntentMode::hierarchical, t.input(e_c),
                                             t.input(h_enc), mask, e_v);
    return ad::sum_all(t, ad::square(t, sti));
  };

  ad::GradStore gs(f.ps);
  ad::Tape tape(&f.ps, &gs);
  tape.backward(graph(tape));

  const char* checked[] = {"hcaim.refine.q.w", "hcaim.refine.k.w", "hcaim.refine.v.w",
                           "hcaim.target.q.w", "hcaim.target.k.w", "hcaim.target.v.w",
                           "item_emb"};
  const Real h = 1e-5;
  for (const char* name : checked) {
    int id = f.ps.find(name);
    Mat& w = f.ps.value(id);
    for (Index i = 0; i < w.size(); ++i) {
      Real orig = w(i);
      auto eval = [&] {
        ad::Tape t(&f.ps, nullptr, false);
        return t.value(graph(t))(0, 0);
      };
      w(i) = orig + h;
      Real fp = eval();
      w(i) = orig - h;
      Real fm = eval();
      w(i) = orig;
      Real fd = (fp - fm) / (2 * h);
      Real an = gs.grad(id)(i);
      CHECK(std::abs(fd - an) <= 1e-4 * (1.0 + std::max(std::abs(fd), std::abs(an))));
    }
  }
}
