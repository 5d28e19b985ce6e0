#pragma once

// Finite-difference checks for every differentiable block of the model,
// run in double on the tiny fixture configuration.

#include <string>
#include <vector>

#include "curling/composition.hpp"
#include "curling/encoders.hpp"
#include "curling/model.hpp"
#include "curling/objective.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace curling::testing {

struct OpCheck {
  std::string op;
  GradCheckResult result;
};

using NamedParams = std::vector<std::pair<std::string, Parameter<double>*>>;

inline void append(NamedParams& to, const NamedParams& from) { to.insert(to.end(), from.begin(), from.end()); }

// Trainable inputs so probes also land on the data side of each op.
struct InputBank {
  std::vector<Parameter<double>> experts;
  Mask availability;

  InputBank(const ModelConfig& c, Index rows, std::mt19937_64& rng, const Mask& avail) : availability(avail) {
    for (std::size_t i = 0; i < c.n_experts(); ++i) experts.push_back(random_param(rows, static_cast<Index>(c.d_e), rng));
  }

  ExpertBankVar<double> on(Tape<double>& t) {
    ExpertBankVar<double> b;
    b.availability = availability;
    for (auto& e : experts) b.experts.push_back(t.param(e));
    return b;
  }

  NamedParams named(const std::string& prefix) {
    NamedParams out;
    for (std::size_t i = 0; i < experts.size(); ++i) out.emplace_back(prefix + std::to_string(i), &experts[i]);
    return out;
  }
};

inline Mask partial_mask(Index rows, Index experts) {
  Mask m = Mask::Ones(rows, experts);
  // Every expert keeps at least two live rows so training-mode batch norm has a spread.
  for (Index i = 1; i < experts; ++i) m((i - 1) % rows, i) = 0;
  return m;
}

inline std::vector<OpCheck> run_gradient_suite(int probes, std::uint64_t seed = 2024) {
  const ModelConfig c = tiny_config();
  Model<double> m(c);
  perturb_running_stats(m, seed);
  std::mt19937_64 rng(seed);
  const auto n = static_cast<Index>(c.n_experts());
  const auto d_text = static_cast<Index>(c.d_text());
  std::vector<OpCheck> out;

  {
    auto& vlad = m.image.attributes[0].vlad;
    init_normal(vlad.assign_bias, 1, vlad.clusters(), 0.5, rng);
    Parameter<double> desc = random_param(3, static_cast<Index>(c.d_w), rng);
    NamedParams ps = params_with_prefix(m, {"image.attr.1.vlad"});
    ps.emplace_back("descriptors", &desc);
    auto build = [&](Tape<double>& t) { return project_to_scalar(encoders::netvlad_pool(t, t.param(desc), vlad), 1); };
    out.push_back({"netvlad_pool", check_gradients(ps, build, probes, seed + 1)});
  }
  {
    Parameter<double> x = random_param(3, static_cast<Index>(c.d_e), rng);
    Parameter<double> ctx = random_param(3, static_cast<Index>(c.d_e), rng);
    NamedParams ps = params_with_prefix(m, {"image.attr.1.gate"});
    ps.emplace_back("x", &x);
    ps.emplace_back("context", &ctx);
    auto build = [&](Tape<double>& t) {
      return project_to_scalar(encoders::context_gate(t, t.param(x), t.param(ctx), m.image.attributes[0].gate), 2);
    };
    out.push_back({"context_gate", check_gradients(ps, build, probes, seed + 2)});
  }
  {
    InputBank bank(c, 3, rng, partial_mask(3, n));
    NamedParams ps = params_with_prefix(m, {"image.collab"});
    append(ps, bank.named("expert"));
    auto build = [&](Tape<double>& t) {
      ExpertBankVar<double> g = encoders::collaborative_gate(t, bank.on(t), m.image.collab);
      return project_to_scalar(ag::concat_cols(g.experts), 3);
    };
    out.push_back({"collaborative_gate", check_gradients(ps, build, probes, seed + 3)});
  }
  {
    std::vector<data::TokenSequence> seqs = {random_sequence(c, rng, 5), random_sequence(c, rng, 1),
                                             random_sequence(c, rng, 3)};
    NamedParams ps = params_with_prefix(m, {"embedding", "text."});
    auto build = [&](Tape<double>& t) {
      return project_to_scalar(m.encode_text(t, std::span<const data::TokenSequence>(seqs)).concat, 4);
    };
    out.push_back({"encode_text", check_gradients(ps, build, probes, seed + 4)});
  }
  {
    Parameter<double> a = random_param(3, static_cast<Index>(c.d_e), rng);
    Parameter<double> b = random_param(3, d_text, rng);
    NamedParams ps = params_with_prefix(m, {"delivery.0.fusion"});
    ps.emplace_back("a", &a);
    ps.emplace_back("b", &b);
    auto build = [&](Tape<double>& t) {
      auto f = composition::fusion_layer(t, t.param(a), t.param(b), m.delivery[0].fusion);
      return ag::add(project_to_scalar(f.blocks, 5), project_to_scalar(f.projected, 6));
    };
    out.push_back({"fusion_layer", check_gradients(ps, build, probes, seed + 5)});
  }
  {
    InputBank bank(c, 4, rng, partial_mask(4, n));
    Parameter<double> text = random_param(4, d_text, rng);
    NamedParams ps = params_with_prefix(m, {"delivery."});
    append(ps, bank.named("source"));
    ps.emplace_back("text", &text);
    auto build = [&](Tape<double>& t) {
      Rng drop(99);  // same dropout masks on every evaluation
      ForwardMode mode{true, &drop, 0.1};
      auto moved = m.deliver(t, bank.on(t), TextVar<double>{{}, {}, {}, t.param(text)}, mode);
      return project_to_scalar(ag::concat_cols(moved.experts), 7);
    };
    out.push_back({"delivery", check_gradients(ps, build, probes, seed + 6)});
  }
  {
    InputBank bank(c, 3, rng, partial_mask(3, n));
    Parameter<double> text = random_param(3, d_text, rng);
    NamedParams ps = params_with_prefix(m, {"sweep."});
    append(ps, bank.named("candidate"));
    ps.emplace_back("text", &text);
    auto build = [&](Tape<double>& t) {
      auto swept = m.sweep(t, bank.on(t), t.param(text));
      return project_to_scalar(ag::concat_cols(swept.experts), 8);
    };
    out.push_back({"sweep", check_gradients(ps, build, probes, seed + 7)});
  }
  {
    Parameter<double> text = random_param(3, d_text, rng);
    const Mask mask = partial_mask(3, n);
    NamedParams ps = params_with_prefix(m, {"mix."});
    ps.emplace_back("text", &text);
    auto build = [&](Tape<double>& t) {
      return project_to_scalar(objective::mixture_weights(t, t.param(text), mask, m.mix), 9);
    };
    out.push_back({"mixture_weights", check_gradients(ps, build, probes, seed + 8)});
  }
  {
    Parameter<double> sim = random_param(4, 4, rng, 0.1);  // cosine-sized, keeps s * sim unsaturated
    objective::LossConfig loss;
    NamedParams ps = {{"similarity", &sim}};
    auto build = [&](Tape<double>& t) { return objective::am_softmax_loss(t.param(sim), loss); };
    out.push_back({"am_softmax_loss", check_gradients(ps, build, probes, seed + 9)});
  }
  {
    // Whole chain on a 2-triplet batch: encoders, both filters, mixture, loss.
    // Both sources carry every expert: a one-row batch norm sits exactly on
    // the ReLU kink, where central differences see a one-sided slope.
    std::vector<ImageInput> sources = {random_image(c, rng, {2, 1}), random_image(c, rng, {1, 3})};
    std::vector<ImageInput> targets = {random_image(c, rng, {3, 2}), random_image(c, rng, {0, 1})};
    std::vector<data::TokenSequence> texts = {random_sequence(c, rng, 4), random_sequence(c, rng, 2)};
    objective::LossConfig loss;
    NamedParams ps = m.registry().params;
    auto build = [&](Tape<double>& t) {
      Rng drop(5);
      ForwardMode mode{true, &drop, 0.1};
      return m.batch_loss(t, sources, targets, texts, loss, mode);
    };
    out.push_back({"full_loss", check_gradients(ps, build, probes, seed + 10)});
  }
  return out;
}

}  // namespace curling::testing
