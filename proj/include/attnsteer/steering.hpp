#pragma once

#include <fstream>

#include "attnsteer/energy.hpp"

namespace attnsteer {

// Test-time optimization of the latent p_v added to the visual tokens. Two
// loops: plain gradient descent with EMA smoothing and early stopping, and the
// Adam variant which drops both in favor of moment estimates. The model is
// frozen throughout; only p_v moves.

struct EarlyStopConfig {
  bool enabled = true;
  double energy_threshold = 0.2;
  double min_improvement = 0.01;  // relative drop per iteration
};

struct SteeringConfig {
  int T = 5;              // optimization iterations
  double alpha = 400.0;   // energy scale
  double beta = 0.5;      // EMA decay on the iterate (gradient-descent loop)
  double lr = 0.03;       // Adam step size
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double gamma = 0.7;     // debias contrast weight, consumed by decoding
  EarlyStopConfig early_stop;
  AggregationSpec aggregation;
  EnergyMode energy_mode = EnergyMode::Hard;
  double sigma = 0.1;             // soft-weight Gaussian std
  bool normalized_weights = true;

  void validate() const {
    require(T >= 0, "steering config: T must be >= 0");
    require(alpha > 0.0, "steering config: alpha must be positive");
    require(beta >= 0.0 && beta < 1.0, "steering config: beta must lie in [0,1)");
    require(lr > 0.0, "steering config: lr must be positive");
    require(gamma >= 0.0, "steering config: gamma must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "steering config: beta1/beta2 must lie in [0,1)");
    require(epsilon > 0.0, "steering config: epsilon must be positive");
    require(sigma > 0.0, "steering config: sigma must be positive");
  }
};

/// Gradient-descent defaults: T=5, alpha=400, beta=0.5, context-token
/// aggregation over all layers.
inline SteeringConfig gd_defaults(int n_layers) {
  SteeringConfig c;
  c.T = 5;
  c.aggregation = context_token_spec(n_layers);
  return c;
}

/// Adam defaults: T=3, alpha=400, lr=0.03, answer-start aggregation over the
/// middle layer window.
inline SteeringConfig adam_defaults(int n_layers) {
  SteeringConfig c;
  c.T = 3;
  c.aggregation = answer_start_spec(n_layers);
  return c;
}

// --- Adam state -----------------------------------------------------------------

/// Moment buffers for one optimized tensor. Shared by test-time steering and
/// toy training.
struct AdamState {
  Tensor m;  // first moment
  Tensor v;  // second moment
  int t = 0;

  explicit AdamState(const std::vector<int>& shape)
      : m(Tensor::zeros(shape)), v(Tensor::zeros(shape)) {}
};

/// One bias-corrected Adam step in place:
///   m_t = b1 m_{t-1} + (1-b1) g        v_t = b2 v_{t-1} + (1-b2) g^2
///   m̂ = m_t/(1-b1^t)                   v̂ = v_t/(1-b2^t)
///   x -= lr m̂ / (sqrt(v̂) + eps)
inline void adam_step(AdamState& st, Tensor& x, const Tensor& grad, double lr, double beta1,
                      double beta2, double epsilon) {
  require(x.same_shape(grad) && x.same_shape(st.m),
          "adam_step: shape mismatch between iterate, gradient, and state");
  st.t += 1;
  double bc1 = 1.0 - std::pow(beta1, st.t);
  double bc2 = 1.0 - std::pow(beta2, st.t);
  for (size_t i = 0; i < x.data.size(); ++i) {
    double gi = grad.data[i];
    st.m.data[i] = beta1 * st.m.data[i] + (1.0 - beta1) * gi;
    st.v.data[i] = beta2 * st.v.data[i] + (1.0 - beta2) * gi * gi;
    double mhat = st.m.data[i] / bc1;
    double vhat = st.v.data[i] / bc2;
    x.data[i] -= lr * mhat / (std::sqrt(vhat) + epsilon);
  }
}

// --- traces ---------------------------------------------------------------------

enum class StopReason { MaxIters, EnergyThreshold, NoImprovement };

inline const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::MaxIters: return "max_iters";
    case StopReason::EnergyThreshold: return "energy_threshold";
    default: return "no_improvement";
  }
}

struct TraceRecord {
  int iter = 0;
  double energy = 0.0;
  double mass_ratio = 0.0;
  double in_region_mass = 0.0;  // unweighted hard-mask share of the aggregated map
  double grad_norm = 0.0;
  double p_v_norm = 0.0;
};

struct SteeringTrace {
  std::vector<TraceRecord> records;
  StopReason stop = StopReason::MaxIters;

  double initial_energy() const { return records.front().energy; }
  double final_energy() const { return records.back().energy; }
};

inline void write_trace_csv(const SteeringTrace& trace, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open trace csv for writing: " + path);
  f << "iter,energy,mass_ratio,grad_norm,p_v_norm\n";
  char line[256];
  for (const TraceRecord& r : trace.records) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", r.iter, r.energy,
                  r.mass_ratio, r.grad_norm, r.p_v_norm);
    f << line;
  }
  if (!f) throw io_error("write failed for trace csv: " + path);
}

// --- steering loops ---------------------------------------------------------------

struct SteerResult {
  Tensor p_v;  // detached final latent, [n_v x d_model]
  SteeringTrace trace;
};

/// Gradient descent on p_v with iterate EMA and early stopping. Each
/// iteration records the energy it acted on; the final record is the state
/// after the last update, so the trace holds at most T+1 rows. The raw update
/// u = p_v - alpha*grad is smoothed as p_v <- beta*p_v + (1-beta)*u, which at
/// beta=0 is plain descent.
inline SteerResult steer_gd(const ModelParams& params, const Tensor& feats,
                            const std::vector<int>& text, const VisualPrompt& prompt,
                            const SteeringConfig& cfg) {
  cfg.validate();
  EnergyTarget target = make_energy_target(prompt, params.cfg.grid, cfg.energy_mode,
                                           cfg.sigma, cfg.normalized_weights);
  SteerResult out;
  out.p_v = Tensor::zeros({params.cfg.n_vis(), params.cfg.d_model});
  out.trace.stop = StopReason::MaxIters;
  double prev_energy = 0.0;
  for (int t = 0;; ++t) {
    bool last = t == cfg.T;
    EnergyEval ev = last ? energy_only(params, feats, text, target, cfg.aggregation, out.p_v)
                         : energy_gradient(params, feats, text, target, cfg.aggregation,
                                           out.p_v);
    out.trace.records.push_back(TraceRecord{t, ev.value, ev.mass_ratio, ev.in_region_mass,
                                            l2_norm(ev.grad.data), l2_norm(out.p_v.data)});
    if (last) break;
    if (cfg.early_stop.enabled) {
      if (ev.value < cfg.early_stop.energy_threshold) {
        out.trace.stop = StopReason::EnergyThreshold;
        break;
      }
      if (t > 0 && (prev_energy - ev.value) / std::max(prev_energy, 1e-12) <
                       cfg.early_stop.min_improvement) {
        out.trace.stop = StopReason::NoImprovement;
        break;
      }
    }
    prev_energy = ev.value;
    for (size_t i = 0; i < out.p_v.data.size(); ++i) {
      double u = out.p_v.data[i] - cfg.alpha * ev.grad.data[i];
      out.p_v.data[i] = cfg.beta * out.p_v.data[i] + (1.0 - cfg.beta) * u;
    }
    check_finite(out.p_v, "steer_gd p_v");
  }
  return out;
}

/// Adam on p_v against the scaled energy alpha*E. No EMA and no early stop;
/// exactly T update steps with the step counter starting at 1.
inline SteerResult steer_adam(const ModelParams& params, const Tensor& feats,
                              const std::vector<int>& text, const VisualPrompt& prompt,
                              const SteeringConfig& cfg) {
  cfg.validate();
  EnergyTarget target = make_energy_target(prompt, params.cfg.grid, cfg.energy_mode,
                                           cfg.sigma, cfg.normalized_weights);
  SteerResult out;
  out.p_v = Tensor::zeros({params.cfg.n_vis(), params.cfg.d_model});
  out.trace.stop = StopReason::MaxIters;
  AdamState st(out.p_v.shape);
  for (int t = 0;; ++t) {
    bool last = t == cfg.T;
    EnergyEval ev = last ? energy_only(params, feats, text, target, cfg.aggregation, out.p_v)
                         : energy_gradient(params, feats, text, target, cfg.aggregation,
                                           out.p_v, cfg.alpha);
    out.trace.records.push_back(TraceRecord{t, ev.value, ev.mass_ratio, ev.in_region_mass,
                                            l2_norm(ev.grad.data), l2_norm(out.p_v.data)});
    if (last) break;
    adam_step(st, out.p_v, ev.grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    check_finite(out.p_v, "steer_adam p_v");
  }
  return out;
}

}  // namespace attnsteer
