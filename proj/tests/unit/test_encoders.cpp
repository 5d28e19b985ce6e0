#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "curling/encoders.hpp"
#include "curling/model.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace curling {
namespace {

using testing::random_image;
using testing::random_sequence;
using testing::tiny_config;
using V = oracle::V;

template <class S>
V row_of(const Var<S>& v, Index r = 0) {
  V out(static_cast<std::size_t>(v.cols()));
  for (Index c = 0; c < v.cols(); ++c) out[static_cast<std::size_t>(c)] = static_cast<double>(v.value()(r, c));
  return out;
}

template <class S>
V vec_of(const Vec<S>& v) {
  V out(static_cast<std::size_t>(v.size()));
  for (Index c = 0; c < v.size(); ++c) out[static_cast<std::size_t>(c)] = static_cast<double>(v[c]);
  return out;
}

double max_diff(const V& a, const V& b) {
  REQUIRE(a.size() == b.size());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

double norm(const V& a) { return std::sqrt(oracle::dot(a, a)); }

Mat<double> rows(std::initializer_list<std::initializer_list<double>> values) {
  Mat<double> m(static_cast<Index>(values.size()), static_cast<Index>(values.begin()->size()));
  Index r = 0;
  for (const auto& row : values) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

TEST_CASE("netvlad_pool") {
  encoders::NetVladParams<double> p;
  Rng rng(3);
  p.init(2, 2, rng);

  SUBCASE("no descriptors gives the zero vector") {
    Tape<double> t(false);
    Var<double> out = encoders::netvlad_pool(t, t.constant(Mat<double>(0, 2)), p);
    CHECK(out.cols() == 4);
    CHECK(out.value().isZero(0));
  }

  SUBCASE("descriptor on a center with one-hot assignment") {
    p.centers.value = rows({{1, 0}, {0, 1}});
    p.assign.value.setZero();
    p.assign_bias.value = rows({{50, -50}});
    Tape<double> t(false);
    V out = row_of(encoders::netvlad_pool(t, t.constant(rows({{1, 0}})), p));
    // Block 1 residual is x - c1 = 0. Block 2 carries a vanishing weight times
    // (1, -1), which survives intra-normalization as (1, -1) / sqrt(2).
    const double h = 1 / std::sqrt(2.0);
    CHECK(max_diff(out, {0, 0, h, -h}) < 1e-9);
  }

  SUBCASE("uniform assignment, hand evaluated") {
    p.centers.value = rows({{0, 0}, {1, 1}});
    p.assign.value.setZero();
    p.assign_bias.value.setZero();
    Tape<double> t(false);
    V out = row_of(encoders::netvlad_pool(t, t.constant(rows({{1, 0}, {0, 2}})), p));
    // block1 = 0.5 (1,0) + 0.5 (0,2) = (0.5, 1); block2 = 0.5 (0,-1) + 0.5 (-1,1) = (-0.5, 0)
    // each normalized to unit length, then the pair divided by sqrt(2).
    const double r2 = std::sqrt(2.0), r5 = std::sqrt(1.25);
    CHECK(max_diff(out, {0.5 / r5 / r2, 1 / r5 / r2, -1 / r2, 0}) < 1e-12);
  }

  SUBCASE("matches the scalar oracle and ignores row order") {
    std::mt19937_64 g(5);
    Mat<double> x = testing::random_matrix(5, 2, g);
    Tape<double> t(false);
    V out = row_of(encoders::netvlad_pool(t, t.constant(x), p));
    std::vector<V> desc;
    for (Index r = 0; r < 5; ++r) desc.push_back({x(r, 0), x(r, 1)});
    CHECK(max_diff(out, oracle::netvlad(desc, p)) < 1e-12);
    Mat<double> shuffled = x;
    shuffled.row(0) = x.row(3);
    shuffled.row(3) = x.row(4);
    shuffled.row(4) = x.row(0);
    CHECK(max_diff(out, row_of(encoders::netvlad_pool(t, t.constant(shuffled), p))) <= 1e-6);
  }

  SUBCASE("wrong descriptor width is a shape error") {
    Tape<double> t(false);
    CHECK_THROWS_AS(encoders::netvlad_pool(t, t.constant(Mat<double>::Zero(2, 3)), p), ShapeError);
  }
}

TEST_CASE("netvlad permutation invariance in float at default width") {
  encoders::NetVladParams<float> p;
  Rng rng(8);
  p.init(4, 300, rng);
  std::mt19937_64 g(9);
  Mat<float> x = testing::random_matrix(7, 300, g).cast<float>();
  Mat<float> y = x.colwise().reverse();
  Tape<float> t(false);
  Mat<float> a = encoders::netvlad_pool(t, t.constant(x), p).value();
  Mat<float> b = encoders::netvlad_pool(t, t.constant(y), p).value();
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-6f);
}

TEST_CASE("context_gate") {
  Linear<double> gate;
  Rng rng(4);
  gate.init(8, 4, rng);
  const Mat<double> x = rows({{0.3, -1.2, 2.0, 0.7}});
  const Mat<double> ctx = rows({{1.0, 0.5, -0.5, 0.25}});
  Tape<double> t(false);

  SUBCASE("zero parameters halve the input") {
    gate.weight.value.setZero();
    gate.bias.value.setZero();
    CHECK(encoders::context_gate(t, t.constant(x), t.constant(ctx), gate).value().isApprox(0.5 * x, 1e-15));
  }
  SUBCASE("saturated bias passes the input through") {
    gate.weight.value.setZero();
    gate.bias.value.setConstant(50);
    CHECK((encoders::context_gate(t, t.constant(x), t.constant(ctx), gate).value() - x).cwiseAbs().maxCoeff() < 1e-6);
  }
  SUBCASE("random instance matches the scalar oracle") {
    V got = row_of(encoders::context_gate(t, t.constant(x), t.constant(ctx), gate));
    CHECK(max_diff(got, oracle::context_gate({0.3, -1.2, 2.0, 0.7}, {1.0, 0.5, -0.5, 0.25}, gate)) < 1e-12);
  }
  SUBCASE("mismatched context is a shape error") {
    CHECK_THROWS_AS(encoders::context_gate(t, t.constant(x), t.constant(Mat<double>::Zero(1, 3)), gate), ShapeError);
  }
}

TEST_CASE("attribute expert chains NetVLAD and the context gate") {
  ModelConfig c = tiny_config();
  c.d_w = 2;
  c.vlad_clusters = 2;
  c.d_e = 3;
  Model<double> m(c);
  std::mt19937_64 g(12);
  ImageInput img = random_image(c, g, {2, 0});
  Tape<double> t(false);
  Var<double> base = m.image.base_proj(t, t.constant(Eigen::Map<const Eigen::RowVectorXf>(img.feature.data(), 6).cast<double>()));
  std::vector<std::vector<int>> tokens = {img.attribute_tokens[0], {}};
  Var<double> both = encoders::attribute_expert(t, tokens, ag::vstack<double>({base, base}), m.embedding, m.image.attributes[0]);

  V expected = oracle::attribute_expert(img.attribute_tokens[0], row_of(base), m.embedding, m.image.attributes[0]);
  CHECK(max_diff(row_of(both, 0), expected) < 1e-12);
  CHECK(both.value().row(1).isZero(0));

  // Same tokens on the same image give the same output.
  std::vector<std::vector<int>> twice = {{3, 3}, {3, 3}};
  Var<double> dup = encoders::attribute_expert(t, twice, ag::vstack<double>({base, base}), m.embedding, m.image.attributes[0]);
  CHECK(dup.value().row(0) == dup.value().row(1));
}

TEST_CASE("collaborative_gate") {
  const ModelConfig c = tiny_config();
  Model<double> m(c);
  std::mt19937_64 g(21);
  Tape<double> t(false);
  auto make_bank = [&](const Mask& avail) {
    ExpertBankVar<double> b;
    b.availability = avail;
    for (Index i = 0; i < avail.cols(); ++i) {
      Mat<double> e = testing::random_matrix(avail.rows(), 5, g);
      for (Index r = 0; r < avail.rows(); ++r)
        if (!avail(r, i)) e.row(r).setZero();
      b.experts.push_back(t.constant(e));
    }
    return b;
  };
  auto to_oracle = [](const ExpertBankVar<double>& b, Index r) {
    oracle::Bank o;
    for (Index i = 0; i < b.size(); ++i) {
      o.experts.push_back(row_of(b.experts[static_cast<std::size_t>(i)], r));
      o.available.push_back(b.availability(r, i) != 0);
    }
    return o;
  };

  SUBCASE("random three-expert instances match the oracle") {
    Mask avail(3, 3);
    avail << 1, 1, 1, 1, 0, 1, 1, 0, 0;
    ExpertBankVar<double> bank = make_bank(avail);
    ExpertBankVar<double> out = encoders::collaborative_gate(t, bank, m.image.collab);
    CHECK(out.availability == avail);
    for (Index r = 0; r < 3; ++r) {
      oracle::Bank want = oracle::collaborative_gate(to_oracle(bank, r), m.image.collab);
      for (Index i = 0; i < 3; ++i) CHECK(max_diff(row_of(out.experts[static_cast<std::size_t>(i)], r), want.experts[static_cast<std::size_t>(i)]) < 1e-12);
    }
  }

  SUBCASE("only the base expert: sum over others is empty") {
    Mask avail(1, 3);
    avail << 1, 0, 0;
    ExpertBankVar<double> bank = make_bank(avail);
    ExpertBankVar<double> out = encoders::collaborative_gate(t, bank, m.image.collab);
    V e0 = row_of(bank.experts[0]);
    V attn = oracle::linear(oracle::relu(oracle::linear(V(4, 0.0), m.image.collab.hidden[0])), m.image.collab.out[0]);
    V gated(5);
    for (std::size_t k = 0; k < 5; ++k) gated[k] = oracle::sigmoid(attn[k]) * e0[k];
    CHECK(max_diff(row_of(out.experts[0]), oracle::normalize(gated)) < 1e-12);
    CHECK(out.experts[1].value().isZero(0));
    CHECK(out.experts[2].value().isZero(0));
  }

  SUBCASE("zero parameters leave each expert's direction") {
    for (auto& [name, p] : m.registry().params)
      if (name.rfind("image.collab", 0) == 0) p->value.setZero();
    ExpertBankVar<double> bank = make_bank(Mask::Ones(2, 3));
    ExpertBankVar<double> out = encoders::collaborative_gate(t, bank, m.image.collab);
    for (std::size_t i = 0; i < 3; ++i)
      for (Index r = 0; r < 2; ++r) CHECK(max_diff(row_of(out.experts[i], r), oracle::normalize(row_of(bank.experts[i], r))) < 1e-15);
  }
}

TEST_CASE("encode_image") {
  const ModelConfig c = tiny_config();
  Model<double> m(c);
  std::mt19937_64 g(17);

  SUBCASE("no attributes leaves only the base expert") {
    ImageInput img = random_image(c, g, {0, 0});
    ExpertBank<double> bank = m.encode_image(img);
    CHECK(bank.availability == std::vector<bool>{true, false, false});
    CHECK(std::abs(bank.experts[0].norm() - 1.0) <= 1e-6);
    CHECK(bank.experts[1].isZero(0));
    CHECK(bank.experts[2].isZero(0));
  }

  SUBCASE("batched encoding matches the chained oracle and is unit norm") {
    std::vector<ImageInput> imgs = {random_image(c, g, {1, 3}), random_image(c, g, {0, 2}), random_image(c, g, {4, 0})};
    Tape<double> t(false);
    ExpertBankVar<double> bank = m.encode_images(t, imgs);
    for (Index r = 0; r < 3; ++r) {
      oracle::Bank want = oracle::encode_image(imgs[static_cast<std::size_t>(r)], m);
      for (std::size_t i = 0; i < 3; ++i) {
        V got = row_of(bank.experts[i], r);
        CHECK(max_diff(got, want.experts[i]) < 1e-12);
        CHECK((bank.availability(r, static_cast<Index>(i)) != 0) == want.available[i]);
        if (want.available[i]) {
          CHECK(std::abs(norm(got) - 1.0) <= 1e-6);
        } else {
          CHECK(norm(got) == 0.0);
        }
      }
    }
  }

  SUBCASE("pure in evaluation mode") {
    ImageInput img = random_image(c, g, {2, 1});
    ExpertBank<double> a = m.encode_image(img), b = m.encode_image(img);
    for (std::size_t i = 0; i < a.experts.size(); ++i) CHECK(a.experts[i] == b.experts[i]);
  }

  SUBCASE("feature of the wrong width is a shape error") {
    ImageInput img = random_image(c, g, {1, 1});
    img.feature.pop_back();
    CHECK_THROWS_AS(m.encode_image(img), ShapeError);
  }
}

TEST_CASE("unit norms at default dimensions in float") {
  ModelConfig c;
  c.d_img = 64;
  c.vocab_size = 50;
  Model<float> m(c);
  std::mt19937_64 g(40);
  for (int k = 0; k < 5; ++k) {
    ImageInput img = random_image(c, g);
    ExpertBank<float> bank = m.encode_image(img);
    for (std::size_t i = 0; i < bank.experts.size(); ++i) {
      if (bank.availability[i]) {
        CHECK(std::abs(bank.experts[i].cast<double>().norm() - 1.0) <= 1e-6);
      } else {
        CHECK(bank.experts[i].isZero(0));
      }
    }
  }
}

TEST_CASE("encode_text") {
  ModelConfig c = tiny_config();
  std::mt19937_64 g(23);

  SUBCASE("length one: global is the word's embedding") {
    Model<double> m(c);
    data::TokenSequence s{{7, 0, 0, 0}, 1};
    TextEncoding<double> e = m.encode_text(s);
    CHECK(e.global == m.embedding.value.row(7).transpose());
  }

  SUBCASE("repeating one token does not move the mean") {
    Model<double> m(c);
    TextEncoding<double> a = m.encode_text(data::TokenSequence{{5, 5, 5, 0, 0}, 3});
    TextEncoding<double> b = m.encode_text(data::TokenSequence{{5, 5, 5, 5, 5}, 5});
    CHECK(max_diff(vec_of(a.global), vec_of(b.global)) < 1e-15);
  }

  SUBCASE("concat is exactly the three levels") {
    Model<double> m(c);
    TextEncoding<double> e = m.encode_text(random_sequence(c, g, 4));
    CHECK(e.concat.size() == static_cast<Index>(c.d_text()));
    CHECK(e.concat.head(4) == e.global);
    CHECK(e.concat.segment(4, 6) == e.temporal);
    CHECK(e.concat.tail(6) == e.local);
  }

  for (TemporalReduce mode : {TemporalReduce::kMean, TemporalReduce::kLast}) {
    c.temporal = mode;
    Model<double> m(c);
    CAPTURE(static_cast<int>(mode));
    std::vector<data::TokenSequence> seqs = {random_sequence(c, g, 3), random_sequence(c, g, 1),
                                             random_sequence(c, g, 6), random_sequence(c, g, 2)};
    Tape<double> t(false);
    TextVar<double> batch = m.encode_text(t, seqs);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      oracle::Text want = oracle::encode_text(seqs[r], m);
      CHECK(max_diff(row_of(batch.global, static_cast<Index>(r)), want.global) < 1e-12);
      CHECK(max_diff(row_of(batch.temporal, static_cast<Index>(r)), want.temporal) < 1e-12);
      CHECK(max_diff(row_of(batch.local, static_cast<Index>(r)), want.local) < 1e-12);
    }
  }

  SUBCASE("float at default dimensions matches the recurrence oracle to 1e-5") {
    ModelConfig d;
    d.d_img = 16;
    d.vocab_size = 40;
    Model<float> m(d);
    data::TokenSequence s{{4, 17, 9, 0, 0, 0}, 3};
    TextEncoding<float> e = m.encode_text(s);
    oracle::Text want = oracle::encode_text(s, m);
    CHECK(max_diff(vec_of(e.temporal), want.temporal) < 1e-5);
    CHECK(max_diff(vec_of(e.local), want.local) < 1e-5);
    CHECK(max_diff(vec_of(e.global), want.global) < 1e-5);
  }

  SUBCASE("padding never changes the encoding") {
    Model<double> m(c);
    data::TokenSequence s = random_sequence(c, g, 3, 3);
    TextEncoding<double> alone = m.encode_text(s);
    data::TokenSequence padded = s;
    padded.ids.resize(20, data::Vocab::kPad);
    TextEncoding<double> more = m.encode_text(padded);
    CHECK(max_diff(vec_of(alone.concat), vec_of(more.concat)) <= 1e-6);
    // Sharing a batch with a longer sequence pads it further.
    std::vector<data::TokenSequence> batch = {s, random_sequence(c, g, 9, 9)};
    Tape<double> t(false);
    TextVar<double> b = m.encode_text(t, batch);
    CHECK(max_diff(row_of(b.concat, 0), vec_of(alone.concat)) <= 1e-6);
  }

  SUBCASE("length zero is a data error") {
    Model<double> m(c);
    CHECK_THROWS_AS(m.encode_text(data::TokenSequence{{0, 0}, 0}), DataError);
  }
}

}  // namespace
}  // namespace curling
