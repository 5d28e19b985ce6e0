#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "curling/errors.hpp"
#include "curling/training.hpp"
#include "support/pipeline.hpp"

namespace curling {
namespace {

using namespace training;

std::vector<Mat<float>> snapshot_params(const Model<float>& m) {
  std::vector<Mat<float>> out;
  for (const auto& [name, p] : m.registry().params) out.push_back(p->value);
  return out;
}

TEST_CASE("lr_at") {
  TrainingConfig c;
  CHECK(lr_at(0, c) == 0.0005);
  CHECK(lr_at(10, c) == doctest::Approx(0.00029937).epsilon(1e-4));
  CHECK(std::abs(lr_at(10, c) - 0.0005 * std::pow(0.95, 10)) < 1e-18);

  SUBCASE("strictly decreasing below one") {
    for (std::uint64_t s = 0; s < 200; ++s) CHECK(lr_at(s + 1, c) < lr_at(s, c));
  }
  SUBCASE("decay one is constant") {
    c.decay = 1.0;
    for (std::uint64_t s : {0, 1, 17, 5000}) CHECK(lr_at(s, c) == 0.0005);
  }
  SUBCASE("decay_every holds the rate over a block of steps") {
    c.decay_every = 4;
    CHECK(lr_at(3, c) == lr_at(0, c));
    CHECK(lr_at(4, c) == doctest::Approx(0.0005 * 0.95));
  }
}

TEST_CASE("training config") {
  TrainingConfig c;
  c.lr0 = 0.01;
  c.seed = 99;
  nlohmann::json j = c;
  CHECK(j.get<TrainingConfig>() == c);

  j["learning_rate"] = 1;
  CHECK_THROWS_AS(j.get<TrainingConfig>(), SchemaError);

  TrainingConfig bad;
  bad.decay = 0.0;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
  bad = {};
  bad.decay = 1.5;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
  bad = {};
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), SchemaError);
}

TEST_CASE("epoch_order") {
  const auto a = epoch_order(37, 7, 0);
  std::vector<std::size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> want(37);
  std::iota(want.begin(), want.end(), std::size_t{0});
  CHECK(sorted == want);
  CHECK(a == epoch_order(37, 7, 0));
  CHECK(a != epoch_order(37, 7, 1));
  // seed + epoch is the stream key
  CHECK(epoch_order(37, 8, 0) == epoch_order(37, 7, 1));
  CHECK(epoch_order(0, 1, 0).empty());
}

TEST_CASE("one step applies Adam to the batch gradient") {
  auto w = testing::small_world();
  const auto ex = w.examples();
  auto model = w.model();
  const std::span<const Example> batch(ex.data(), 4);

  // Gradient of the same batch, taken independently (dropout is zero here).
  std::vector<ImageInput> src, tgt;
  std::vector<data::TokenSequence> txt;
  for (const auto& e : batch) {
    src.push_back(e.source);
    tgt.push_back(e.target);
    txt.push_back(e.text);
  }
  for (auto& [name, p] : model->registry().params) p->clear_grad();
  Rng unused(0);
  Tape<float> tape(true);
  Var<float> l = model->batch_loss(tape, src, tgt, txt, w.loss, ForwardMode{true, &unused, 0.0});
  tape.backward(l);
  std::vector<Mat<float>> grads;
  std::vector<bool> touched;
  for (auto& [name, p] : model->registry().params) {
    touched.push_back(p->has_grad());
    grads.push_back(p->has_grad() ? p->grad : Mat<float>::Zero(p->value.rows(), p->value.cols()));
  }
  grads[0].row(0).setZero();  // PAD row of the embedding
  REQUIRE(model->registry().params[0].first.find("embedding") != std::string::npos);

  // Step 0 of Adam: m = (1-b1) g, v = (1-b2) g^2, bias corrections cancel to
  // p -= lr * g / (|g| + eps * sqrt(1-b2)) up to eps placement.
  const auto before = snapshot_params(*model);
  TrainState st = TrainState::fresh(*model);
  const double loss = train_step(*model, st, batch, w.train, w.loss);
  CHECK(loss == doctest::Approx(l.value()(0, 0)));
  CHECK(st.step == 1);
  const auto after = snapshot_params(*model);
  const double lr = w.train.lr0;
  double worst = 0.0;
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (!touched[i]) {
      CHECK(after[i] == before[i]);
      continue;
    }
    for (Index k = 0; k < after[i].size(); ++k) {
      const double g = grads[i].data()[k];
      const double m = 0.1 * g, v = 0.001 * g * g;
      const double m_hat = m / 0.1, v_hat = v / 0.001;
      const double want = before[i].data()[k] - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
      worst = std::max(worst, std::abs(after[i].data()[k] - want));
    }
  }
  CHECK(worst < 2e-7);
}

TEST_CASE("zero learning rate leaves every parameter") {
  auto w = testing::small_world();
  w.train.lr0 = 0.0;
  const auto ex = w.examples();
  auto model = w.model();
  const auto before = snapshot_params(*model);
  TrainState st = TrainState::fresh(*model);
  const EpochResult r = train_epoch(*model, st, ex, w.train, w.loss);
  CHECK(r.batches == 2);
  CHECK(snapshot_params(*model) == before);
}

TEST_CASE("train_epoch batching") {
  auto w = testing::small_world(16, 7);
  const auto ex = w.examples();
  auto model = w.model();
  TrainState st = TrainState::fresh(*model);
  std::vector<StepRecord> log;

  SUBCASE("final batch shorter than two is dropped") {
    w.train.batch_size = 3;  // 3 + 3 + 1
    const EpochResult r = train_epoch(*model, st, ex, w.train, w.loss, [&](const StepRecord& s) { log.push_back(s); });
    CHECK(r.batches == 2);
    CHECK(r.dropped == 1);
    CHECK(st.step == 2);
    CHECK(st.epoch == 1);
    REQUIRE(log.size() == 2);
    CHECK(log[0].step == 0);
    CHECK(log[1].lr == doctest::Approx(lr_at(1, w.train)));
    CHECK(r.mean_loss == doctest::Approx(0.5 * (log[0].loss + log[1].loss)));
  }
  SUBCASE("short batch of two is kept") {
    w.train.batch_size = 5;  // 5 + 2
    const EpochResult r = train_epoch(*model, st, ex, w.train, w.loss);
    CHECK(r.batches == 2);
    CHECK(r.dropped == 0);
  }
  SUBCASE("step budget stops mid epoch") {
    w.train.batch_size = 2;
    const EpochResult r = train_epoch(*model, st, ex, w.train, w.loss, {}, 2);
    CHECK(r.stopped);
    CHECK(r.batches == 2);
    CHECK(st.step == 2);
  }
  SUBCASE("empty input is a data error") {
    CHECK_THROWS_AS(train_epoch(*model, st, std::span<const Example>{}, w.train, w.loss), DataError);
  }
}

TEST_CASE("non-finite loss raises NumericsError") {
  auto w = testing::small_world();
  const auto ex = w.examples();
  auto model = w.model();
  model->mix.bias.value.setConstant(std::numeric_limits<float>::quiet_NaN());
  TrainState st = TrainState::fresh(*model);
  CHECK_THROWS_AS(train_step(*model, st, std::span<const Example>(ex.data(), 4), w.train, w.loss), NumericsError);
  CHECK(st.step == 0);
}

TEST_CASE("seeded runs replay bit for bit") {
  auto w = testing::small_world();
  w.config.dropout = 0.1;
  w.train.lr0 = 0.01;
  const auto ex = w.examples();
  auto run = [&](std::uint64_t seed) {
    w.train.seed = seed;
    auto m = w.model();
    TrainState st = TrainState::fresh(*m);
    for (int e = 0; e < 3; ++e) train_epoch(*m, st, ex, w.train, w.loss);
    return std::make_pair(snapshot_params(*m), st);
  };
  const auto a = run(5), b = run(5), c = run(6);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != c.first);
}

TEST_CASE("a tiny model memorizes its training batch") {
  auto w = testing::small_world(16, 8);
  w.train.lr0 = 0.01;
  w.train.decay = 0.999;
  w.train.batch_size = 8;
  const auto ex = w.examples();
  auto model = w.model();
  TrainState st = TrainState::fresh(*model);
  double first = 0, last = 0;
  for (int s = 0; s < 150; ++s) {
    const double l = train_step(*model, st, ex, w.train, w.loss);
    if (s == 0) first = l;
    last = l;
  }
  CHECK(last < 0.25 * first);
  CHECK(in_batch_recall_at_1(*model, ex) == 1.0);
}

}  // namespace
}  // namespace curling
