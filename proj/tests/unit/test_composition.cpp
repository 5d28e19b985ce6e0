#include "doctest.h"

#include <cmath>

#include "curling/composition.hpp"
#include "curling/model.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace curling {
namespace {

using V = oracle::V;

V row_of(const Var<double>& v, Index r = 0) {
  V out(static_cast<std::size_t>(v.cols()));
  for (Index c = 0; c < v.cols(); ++c) out[static_cast<std::size_t>(c)] = v.value()(r, c);
  return out;
}

double max_diff(const V& a, const V& b) {
  REQUIRE(a.size() == b.size());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// A random bank whose unavailable rows are zero, like encoder output.
ExpertBankVar<double> random_bank(Tape<double>& t, const Mask& avail, Index d, std::mt19937_64& g) {
  ExpertBankVar<double> b;
  b.availability = avail;
  for (Index i = 0; i < avail.cols(); ++i) {
    Mat<double> e = testing::random_matrix(avail.rows(), d, g);
    for (Index r = 0; r < avail.rows(); ++r) {
      if (avail(r, i)) {
        e.row(r).normalize();
      } else {
        e.row(r).setZero();
      }
    }
    b.experts.push_back(t.constant(e));
  }
  return b;
}

TEST_CASE("fusion_layer") {
  Rng rng(2);
  composition::FusionParams<double> p;
  // d_e = 4, d_text = 3, d_f = 2, set directly.
  p.image.init(4, 2, rng);
  p.text.init(3, 2, rng);
  p.out.init(6, 4, rng);
  std::mt19937_64 g(3);
  Mat<double> a = testing::random_matrix(2, 4, g), b = testing::random_matrix(2, 3, g);
  Tape<double> t(false);

  SUBCASE("random instance matches the oracle; block 3 is bitwise the product") {
    auto f = composition::fusion_layer(t, t.constant(a), t.constant(b), p);
    for (Index r = 0; r < 2; ++r) {
      oracle::Fusion want = oracle::fusion(row_of(t.constant(a), r), row_of(t.constant(b), r), p);
      CHECK(max_diff(row_of(f.blocks, r), oracle::concat({want.pa, want.pb, want.prod})) < 1e-12);
      CHECK(max_diff(row_of(f.projected, r), want.projected) < 1e-12);
      for (Index k = 0; k < 2; ++k) CHECK(f.blocks.value()(r, 4 + k) == f.blocks.value()(r, k) * f.blocks.value()(r, 2 + k));
    }
  }
  SUBCASE("text projection pinned to ones: third block equals the first") {
    p.text.weight.value.setZero();
    p.text.bias.value.setOnes();
    auto f = composition::fusion_layer(t, t.constant(a), t.constant(b), p);
    CHECK(f.blocks.value().middleCols(4, 2) == f.blocks.value().leftCols(2));
  }
  SUBCASE("zero image projection zeroes blocks one and three") {
    p.image.weight.value.setZero();
    p.image.bias.value.setZero();
    auto f = composition::fusion_layer(t, t.constant(a), t.constant(b), p);
    CHECK(f.blocks.value().leftCols(2).isZero(0));
    CHECK(f.blocks.value().rightCols(2).isZero(0));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(composition::fusion_layer(t, t.constant(a), t.constant(Mat<double>::Zero(3, 3)), p), ShapeError);
    CHECK_THROWS_AS(composition::fusion_layer(t, t.constant(a), t.constant(Mat<double>::Zero(2, 5)), p), ShapeError);
  }
}

TEST_CASE("delivery") {
  const ModelConfig c = testing::tiny_config();
  Model<double> m(c);
  testing::perturb_running_stats(m, 77);
  std::mt19937_64 g(8);
  Tape<double> t(false);
  Mask avail(3, 3);
  avail << 1, 1, 0, 1, 0, 0, 1, 1, 1;
  ExpertBankVar<double> src = random_bank(t, avail, 5, g);
  Mat<double> text = testing::random_matrix(3, static_cast<Index>(c.d_text()), g);
  TextVar<double> tv{{}, {}, {}, t.constant(text)};

  SUBCASE("evaluation mode matches the oracle; mask preserved; unit norm") {
    auto out = m.deliver(t, src, tv, ForwardMode::eval());
    CHECK(out.availability == avail);
    for (Index r = 0; r < 3; ++r)
      for (Index i = 0; i < 3; ++i) {
        V got = row_of(out.experts[static_cast<std::size_t>(i)], r);
        if (!avail(r, i)) {
          CHECK(max_diff(got, V(5, 0.0)) == 0.0);
          continue;
        }
        V want = oracle::deliver(row_of(src.experts[static_cast<std::size_t>(i)], r), row_of(tv.concat, r),
                                 m.delivery[static_cast<std::size_t>(i)]);
        CHECK(max_diff(got, want) < 1e-12);
        CHECK(std::abs(std::sqrt(oracle::dot(got, got)) - 1) <= 1e-6);
      }
  }
  SUBCASE("saturated gate with no residual returns the normalized source") {
    for (auto& d : m.delivery) {
      d.gate3.weight.value.setZero();
      d.gate3.bias.value.setConstant(50);
      d.w_residual.value.setZero();
    }
    auto out = m.deliver(t, src, tv, ForwardMode::eval());
    for (std::size_t i = 0; i < 3; ++i)
      CHECK((out.experts[i].value() - src.experts[i].value()).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("disabled gate is a pure translation by the residual branch") {
    for (auto& d : m.delivery) {
      d.w_gate.value.setZero();
      d.w_residual.value.setOnes();
    }
    auto out = m.deliver(t, src, tv, ForwardMode::eval());
    for (Index r = 0; r < 3; ++r) {
      if (!avail(r, 0)) continue;
      const auto& d = m.delivery[0];
      V f = oracle::fusion(row_of(src.experts[0], r), row_of(tv.concat, r), d.fusion).projected;
      V res = oracle::normalize(oracle::linear(oracle::relu(oracle::linear(f, d.res1)), d.res2));
      CHECK(max_diff(row_of(out.experts[0], r), res) < 1e-12);
    }
  }
  SUBCASE("training mode keeps the mask and unit norms") {
    Rng drop(1);
    auto out = m.deliver(t, src, tv, ForwardMode{true, &drop, 0.1});
    CHECK(out.availability == avail);
    for (Index r = 0; r < 3; ++r)
      for (Index i = 0; i < 3; ++i) {
        const double n = out.experts[static_cast<std::size_t>(i)].value().row(r).norm();
        CHECK(n == doctest::Approx(avail(r, i) ? 1.0 : 0.0).epsilon(1e-9));
      }
  }
  SUBCASE("shared filters use one parameter set for every expert") {
    ModelConfig shared = c;
    shared.share_filters = true;
    Model<double> ms(shared);
    CHECK(ms.delivery.size() == 1);
    CHECK(ms.sweeps.size() == 1);
    auto out = ms.deliver(t, src, tv, ForwardMode::eval());
    V want = oracle::deliver(row_of(src.experts[2], 2), row_of(tv.concat, 2), ms.delivery[0]);
    CHECK(max_diff(row_of(out.experts[2], 2), want) < 1e-12);
  }
}

TEST_CASE("sweep and bilinear_fuse") {
  const ModelConfig c = testing::tiny_config();
  Model<double> m(c);
  std::mt19937_64 g(10);
  Tape<double> t(false);
  Mask avail(2, 3);
  avail << 1, 0, 1, 1, 1, 0;
  ExpertBankVar<double> cand = random_bank(t, avail, 5, g);
  Mat<double> text = testing::random_matrix(2, static_cast<Index>(c.d_text()), g);

  SUBCASE("rank-2 instance matches the U/V factor oracle; mask preserved") {
    CHECK(c.sweep_rank == 2);
    auto out = m.sweep(t, cand, t.constant(text));
    CHECK(out.availability == avail);
    for (Index r = 0; r < 2; ++r)
      for (Index i = 0; i < 3; ++i) {
        V got = row_of(out.experts[static_cast<std::size_t>(i)], r);
        if (!avail(r, i)) {
          CHECK(max_diff(got, V(5, 0.0)) == 0.0);
          continue;
        }
        V want = oracle::sweep(row_of(cand.experts[static_cast<std::size_t>(i)], r), row_of(t.constant(text), r),
                               m.sweeps[static_cast<std::size_t>(i)]);
        CHECK(max_diff(got, want) < 1e-12);
        CHECK(std::abs(std::sqrt(oracle::dot(got, got)) - 1) <= 1e-6);
      }
  }
  SUBCASE("zero fusion parameters leave the candidate") {
    for (auto& s : m.sweeps) s.u.weight.value.setZero();
    auto out = m.sweep(t, cand, t.constant(text));
    for (std::size_t i = 0; i < 3; ++i)
      CHECK((out.experts[i].value() - cand.experts[i].value()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("zero text adjusts nothing") {
    auto out = m.sweep(t, cand, t.constant(Mat<double>::Zero(2, static_cast<Index>(c.d_text()))));
    for (std::size_t i = 0; i < 3; ++i)
      CHECK((out.experts[i].value() - cand.experts[i].value()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("pairwise sweep equals row-aligned sweep of the gathered pairs") {
    std::vector<Index> cand_rows = {0, 1, 1, 0}, text_rows = {0, 0, 1, 1};
    auto pairs = composition::sweep_pairs(t, cand, t.constant(text), cand_rows, text_rows, m.sweeps);
    auto direct = m.sweep(t, gather_bank(cand, cand_rows), ag::gather_rows(t.constant(text), text_rows));
    CHECK(pairs.availability == direct.availability);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK((pairs.experts[i].value() - direct.experts[i].value()).cwiseAbs().maxCoeff() < 1e-15);
  }

  composition::SweepParams<double> p;
  Rng rng(1);
  p.rank = 1;
  p.u.init(3, 3, rng, false);
  p.v.init(3, 3, rng, false);
  p.proj.init(3, 3, rng, false);

  SUBCASE("identity factors with one-hot text select a coordinate of x") {
    p.u.weight.value.setIdentity();
    p.v.weight.value.setIdentity();
    p.proj.weight.value.setIdentity();
    Mat<double> x(1, 3), text(1, 3);
    x << 2, -3, 5;
    text << 0, 1, 0;
    auto out = composition::bilinear_fuse(t, t.constant(x), t.constant(text), p);
    CHECK(max_diff(row_of(out), {0, -3, 0}) == 0.0);
    // Any projection then maps that coordinate pattern.
    p.proj.weight.value << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    out = composition::bilinear_fuse(t, t.constant(x), t.constant(text), p);
    CHECK(max_diff(row_of(out), {-12, -15, -18}) == 0.0);
  }
  SUBCASE("zero inputs give zero") {
    Mat<double> x = testing::random_matrix(1, 3, g), text = testing::random_matrix(1, 3, g);
    CHECK(composition::bilinear_fuse(t, t.constant(Mat<double>::Zero(1, 3)), t.constant(text), p).value().isZero(0));
    CHECK(composition::bilinear_fuse(t, t.constant(x), t.constant(Mat<double>::Zero(1, 3)), p).value().isZero(0));
    CHECK_THROWS_AS(composition::bilinear_fuse(t, t.constant(x), t.constant(Mat<double>::Zero(2, 3)), p), ShapeError);
  }
}

TEST_CASE("sum baseline composition") {
  const ModelConfig c = testing::tiny_config();
  Model<double> m(c);
  std::mt19937_64 g(4);
  Tape<double> t(false);
  Mat<double> e = testing::random_matrix(1, 5, g);
  e.row(0).normalize();
  Mat<double> text = testing::random_matrix(1, static_cast<Index>(c.d_text()), g);

  SUBCASE("random instance matches the oracle") {
    V want = oracle::normalize([&] {
      V a = oracle::linear(row_of(t.constant(e)), m.sum_baseline.image);
      V b = oracle::linear(row_of(t.constant(text)), m.sum_baseline.text);
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
      return a;
    }());
    CHECK(max_diff(row_of(composition::sum_compose(t, t.constant(e), t.constant(text), m.sum_baseline)), want) < 1e-12);
  }
  SUBCASE("identity image projection, no text: candidate equal to source scores 1") {
    m.sum_baseline.image.weight.value.setIdentity();
    m.sum_baseline.image.bias.value.setZero();
    m.sum_baseline.text.weight.value.setZero();
    m.sum_baseline.text.bias.value.setZero();
    Var<double> q = composition::sum_compose(t, t.constant(e), t.constant(text), m.sum_baseline);
    CHECK(ag::rowdot(q, t.constant(e)).value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    Mat<double> ortho(1, 5);
    ortho << -e(0, 1), e(0, 0), 0, 0, 0;
    CHECK(std::abs(ag::rowdot(q, t.constant(ortho)).value()(0, 0)) < 1e-15);
  }
}

}  // namespace
}  // namespace curling
