#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "curling/autograd.hpp"

namespace curling {

using ag::Index;
using ag::Mat;
using ag::Parameter;
using ag::Tape;
using ag::Var;
using ag::Vec;

using Rng = std::mt19937_64;

// Named view over every trainable tensor and non-trainable buffer of a model.
// Order of registration is the canonical order used by checkpoints.
template <class S>
struct ParamRegistry {
  std::vector<std::pair<std::string, Parameter<S>*>> params;
  std::vector<std::pair<std::string, Mat<S>*>> buffers;

  void add(const std::string& name, Parameter<S>& p) { params.emplace_back(name, &p); }
  void add_buffer(const std::string& name, Mat<S>& m) { buffers.emplace_back(name, &m); }
};

// Whether a forward pass runs in training mode, and the RNG used for dropout.
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;
  double dropout = 0.0;

  static ForwardMode eval() { return {}; }
};

template <class S>
void init_uniform(Parameter<S>& p, Index rows, Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  p.value.resize(rows, cols);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(dist(rng));
  p.grad.resize(0, 0);
}

template <class S>
void init_normal(Parameter<S>& p, Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  p.value.resize(rows, cols);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(dist(rng));
  p.grad.resize(0, 0);
}

template <class S>
void init_constant(Parameter<S>& p, Index rows, Index cols, S value) {
  p.value.setConstant(rows, cols, value);
  p.grad.resize(0, 0);
}

// y = x W + b with W stored (in x out).
template <class S>
struct Linear {
  Parameter<S> weight;
  Parameter<S> bias;
  bool has_bias = true;

  void init(Index in, Index out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight, in, out, bound, rng);
    has_bias = with_bias;
    if (has_bias) {
      init_uniform(bias, 1, out, bound, rng);
    } else {
      bias.value.resize(0, 0);
    }
  }

  Index in_dim() const { return weight.value.rows(); }
  Index out_dim() const { return weight.value.cols(); }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) {
    if (x.cols() != in_dim())
      throw ShapeError("linear: input has " + std::to_string(x.cols()) + " columns, expected " +
                       std::to_string(in_dim()));
    Var<S> y = ag::matmul(x, t.param(weight));
    return has_bias ? ag::add_row(y, t.param(bias)) : y;
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", weight);
    if (has_bias) reg.add(prefix + ".bias", bias);
  }
};

template <class S>
struct BatchNorm {
  Parameter<S> gamma;
  Parameter<S> beta;
  Mat<S> running_mean;
  Mat<S> running_var;
  S momentum = S(0.9);
  S eps = S(1e-5);

  void init(Index dim) {
    init_constant(gamma, 1, dim, S(1));
    init_constant(beta, 1, dim, S(0));
    running_mean.setZero(1, dim);
    running_var.setOnes(1, dim);
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x, const ForwardMode& mode) {
    if (!mode.train) {
      return ag::batch_norm_eval(x, t.param(gamma), t.param(beta), running_mean, running_var, eps);
    }
    ag::BatchStats<S> stats;
    Var<S> y = ag::batch_norm_train(x, t.param(gamma), t.param(beta), eps, &stats);
    const S keep = momentum, take = S(1) - momentum;
    running_mean = keep * running_mean + take * stats.mean.transpose();
    const Index n = x.rows();
    if (n > 1) {
      const S unbias = static_cast<S>(n) / static_cast<S>(n - 1);
      running_var = keep * running_var + take * unbias * stats.var.transpose();
    }
    return y;
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".running_mean", running_mean);
    reg.add_buffer(prefix + ".running_var", running_var);
  }
};

// Inverted dropout; identity outside training or when p == 0.
template <class S>
Var<S> dropout(const Var<S>& x, const ForwardMode& mode) {
  if (!mode.train || mode.dropout <= 0.0 || mode.rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - mode.dropout);
  const S scale = static_cast<S>(1.0 / (1.0 - mode.dropout));
  Mat<S> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*mode.rng) ? scale : S(0);
  return ag::mul_const(x, std::move(mask));
}

template <class S>
Mat<S> column(const std::vector<bool>& flags) {
  Mat<S> m(static_cast<Index>(flags.size()), 1);
  for (std::size_t i = 0; i < flags.size(); ++i) m(static_cast<Index>(i), 0) = flags[i] ? S(1) : S(0);
  return m;
}

}  // namespace curling
