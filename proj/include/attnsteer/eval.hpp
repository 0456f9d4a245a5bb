#pragma once

#include <chrono>
#include <map>

#include "attnsteer/decoding.hpp"
#include "attnsteer/synth.hpp"

namespace attnsteer {

// Two-way referring evaluation. Each sample asks the location-free question
// and the prediction is simply which of the two candidate color tokens gets
// the higher first-step logit, so no generation parsing can blur the
// comparison between modes.

enum class EvalMode { Plain, Edit, GD, Adam, AdamDebias };

inline const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Plain: return "plain";
    case EvalMode::Edit: return "edit";
    case EvalMode::GD: return "gd";
    case EvalMode::Adam: return "adam";
    default: return "adam+debias";
  }
}

inline std::vector<EvalMode> parse_modes(const std::string& csv) {
  std::vector<EvalMode> modes;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    std::string tok = csv.substr(pos, comma == std::string::npos ? csv.size() - pos
                                                                 : comma - pos);
    if (tok == "plain") modes.push_back(EvalMode::Plain);
    else if (tok == "edit") modes.push_back(EvalMode::Edit);
    else if (tok == "gd") modes.push_back(EvalMode::GD);
    else if (tok == "adam") modes.push_back(EvalMode::Adam);
    else if (tok == "adam+debias") modes.push_back(EvalMode::AdamDebias);
    else if (!tok.empty())
      throw std::invalid_argument("unknown eval mode \"" + tok +
                                  "\" (expected plain,edit,gd,adam,adam+debias)");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  require(!modes.empty(), "eval: no modes selected");
  return modes;
}

struct EvalOptions {
  SteeringConfig gd;
  SteeringConfig adam;
  double eta = 10.0;     // edit-attention bias
  double gamma = 0.7;    // debias contrast weight

  static EvalOptions defaults(int n_layers) {
    EvalOptions o;
    o.gd = gd_defaults(n_layers);
    o.adam = adam_defaults(n_layers);
    return o;
  }
};

struct ModeStats {
  int n = 0;
  int correct = 0;
  // Steered modes also track the optimization itself.
  int energy_decreased = 0;
  int mass_increased = 0;
  double sum_initial_energy = 0.0;
  double sum_final_energy = 0.0;
  double sum_mass_before = 0.0;
  double sum_mass_after = 0.0;
  std::map<std::string, int> stop_reasons;

  double accuracy() const { return n > 0 ? static_cast<double>(correct) / n : 0.0; }
};

struct EvalReport {
  int n_samples = 0;
  std::map<std::string, ModeStats> modes;
  // Kept outside the serialized report so identical runs stay byte-identical.
  double wall_seconds = 0.0;
};

namespace detail {

inline int pick_answer(const Tensor& logits, int a, int b) {
  double la = logits.data[static_cast<size_t>(a)];
  double lb = logits.data[static_cast<size_t>(b)];
  if (la > lb) return a;
  if (lb > la) return b;
  return std::min(a, b);
}

/// First-step logits for one sample under one mode, plus the steering trace
/// when the mode optimizes a latent.
inline Tensor mode_logits(const ModelParams& params, const RocSample& s,
                          const Tensor& feats, EvalMode mode, const EvalOptions& opt,
                          SteeringTrace* trace_out) {
  switch (mode) {
    case EvalMode::Plain: {
      Graph g;
      return next_token_logits(run_frozen(g, params, feats, s.question));
    }
    case EvalMode::Edit: {
      RegionMask region = rasterize(s.prompt, params.cfg.grid);
      std::vector<double> bias(static_cast<size_t>(params.cfg.n_vis()), 0.0);
      for (size_t i = 0; i < bias.size(); ++i)
        if (region.cells[i]) bias[i] = opt.eta;
      Graph g;
      return next_token_logits(run_frozen(g, params, feats, s.question, std::nullopt, &bias));
    }
    case EvalMode::GD: {
      SteeringConfig cfg = opt.gd;
      cfg.energy_mode = energy_mode_for(s.prompt);
      SteerResult sr = steer_gd(params, feats, s.question, s.prompt, cfg);
      if (trace_out != nullptr) *trace_out = sr.trace;
      Graph g;
      std::optional<Var> pv = g.constant(sr.p_v);
      return next_token_logits(run_frozen(g, params, feats, s.question, pv));
    }
    case EvalMode::Adam: {
      SteeringConfig cfg = opt.adam;
      cfg.energy_mode = energy_mode_for(s.prompt);
      SteerResult sr = steer_adam(params, feats, s.question, s.prompt, cfg);
      if (trace_out != nullptr) *trace_out = sr.trace;
      Graph g;
      std::optional<Var> pv = g.constant(sr.p_v);
      return next_token_logits(run_frozen(g, params, feats, s.question, pv));
    }
    default: {
      SteeringConfig cfg = opt.adam;
      cfg.energy_mode = energy_mode_for(s.prompt);
      SteerResult sr = steer_adam(params, feats, s.question, s.prompt, cfg);
      if (trace_out != nullptr) *trace_out = sr.trace;
      Graph g_with;
      std::optional<Var> pv = g_with.constant(sr.p_v);
      Tensor with_logits =
          next_token_logits(run_frozen(g_with, params, feats, s.question, pv));
      Graph g_without;
      Tensor without_logits =
          next_token_logits(run_frozen(g_without, params, feats, s.question));
      Tensor combined = Tensor::zeros(with_logits.shape);
      for (size_t j = 0; j < combined.data.size(); ++j)
        combined.data[j] = (1.0 + opt.gamma) * with_logits.data[j] -
                           opt.gamma * without_logits.data[j];
      return combined;
    }
  }
}

}  // namespace detail

/// Run every requested mode over the dataset and aggregate accuracies plus
/// per-optimizer energy and mass statistics. The model is checksummed before
/// and after, so a steering bug that touches parameters fails loudly here.
inline EvalReport eval_roc(const ModelParams& params, const Dataset& ds,
                           const std::vector<EvalMode>& modes, const EvalOptions& opt) {
  require(!ds.samples.empty(), "eval_roc: empty dataset");
  require(ds.grid == params.cfg.grid, "eval_roc: dataset grid " + std::to_string(ds.grid) +
                                          " vs model grid " +
                                          std::to_string(params.cfg.grid));
  const uint64_t checksum_before = params_checksum(params);
  auto t0 = std::chrono::steady_clock::now();

  EvalReport report;
  report.n_samples = static_cast<int>(ds.samples.size());
  for (EvalMode mode : modes) report.modes.emplace(eval_mode_name(mode), ModeStats{});

  for (const RocSample& s : ds.samples) {
    Tensor feats = s.image.features();
    for (EvalMode mode : modes) {
      ModeStats& stats = report.modes.at(eval_mode_name(mode));
      bool steered = mode == EvalMode::GD || mode == EvalMode::Adam ||
                     mode == EvalMode::AdamDebias;
      SteeringTrace trace;
      Tensor logits = detail::mode_logits(params, s, feats, mode, opt,
                                          steered ? &trace : nullptr);
      stats.n += 1;
      if (detail::pick_answer(logits, s.answer_a, s.answer_b) == s.truth)
        stats.correct += 1;
      if (steered && !trace.records.empty()) {
        const TraceRecord& first = trace.records.front();
        const TraceRecord& last = trace.records.back();
        stats.sum_initial_energy += first.energy;
        stats.sum_final_energy += last.energy;
        stats.sum_mass_before += first.in_region_mass;
        stats.sum_mass_after += last.in_region_mass;
        if (last.energy < first.energy) stats.energy_decreased += 1;
        if (last.in_region_mass > first.in_region_mass) stats.mass_increased += 1;
        stats.stop_reasons[stop_reason_name(trace.stop)] += 1;
      }
    }
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(params_checksum(params) == checksum_before,
          "eval_roc: model parameters changed during evaluation");
  return report;
}

/// Canonical report serialization. Wall-clock time is deliberately absent:
/// two identical runs must produce byte-identical files.
inline nlohmann::json eval_report_json(const EvalReport& report) {
  nlohmann::json modes;
  for (const auto& [name, s] : report.modes) {
    nlohmann::json m{{"n", s.n}, {"correct", s.correct}, {"accuracy", s.accuracy()}};
    if (!s.stop_reasons.empty()) {
      m["mean_initial_energy"] = s.sum_initial_energy / s.n;
      m["mean_final_energy"] = s.sum_final_energy / s.n;
      m["mean_mass_before"] = s.sum_mass_before / s.n;
      m["mean_mass_after"] = s.sum_mass_after / s.n;
      m["energy_decreased_frac"] = static_cast<double>(s.energy_decreased) / s.n;
      m["mass_increased_frac"] = static_cast<double>(s.mass_increased) / s.n;
      m["stop_reasons"] = s.stop_reasons;
    }
    modes[name] = std::move(m);
  }
  return nlohmann::json{{"n_samples", report.n_samples}, {"modes", std::move(modes)}};
}

// --- ablation sweeps ---------------------------------------------------------------

/// Alpha sweep (fixed T=5, early stop off) and T sweep (alpha fixed at the
/// default, early stop off), both in the gradient-descent mode, each written
/// as a two-column CSV. `n_limit` caps the samples per point so the sweeps
/// stay cheap.
inline void run_ablation(const ModelParams& params, const Dataset& ds,
                         const std::string& alpha_csv, const std::string& t_csv,
                         int n_limit = 40) {
  require(!ds.samples.empty(), "run_ablation: empty dataset");
  Dataset subset;
  subset.grid = ds.grid;
  subset.seed = ds.seed;
  int n = std::min<int>(n_limit, static_cast<int>(ds.samples.size()));
  subset.samples.assign(ds.samples.begin(), ds.samples.begin() + n);

  auto gd_accuracy = [&](double alpha, int T) {
    EvalOptions opt = EvalOptions::defaults(params.cfg.n_layers);
    opt.gd.alpha = alpha;
    opt.gd.T = T;
    opt.gd.early_stop.enabled = false;
    EvalReport r = eval_roc(params, subset, {EvalMode::GD}, opt);
    return r.modes.at("gd").accuracy();
  };

  {
    std::ofstream f(alpha_csv, std::ios::trunc);
    if (!f) throw io_error("cannot open alpha sweep csv for writing: " + alpha_csv);
    f << "alpha,accuracy\n";
    char line[64];
    for (double alpha : {100.0, 400.0, 1600.0}) {
      std::snprintf(line, sizeof(line), "%.17g,%.17g\n", alpha, gd_accuracy(alpha, 5));
      f << line;
    }
    if (!f) throw io_error("write failed for alpha sweep csv: " + alpha_csv);
  }
  {
    std::ofstream f(t_csv, std::ios::trunc);
    if (!f) throw io_error("cannot open T sweep csv for writing: " + t_csv);
    f << "T,accuracy\n";
    char line[64];
    for (int T : {0, 1, 2, 3, 4, 5}) {
      std::snprintf(line, sizeof(line), "%d,%.17g\n", T, gd_accuracy(400.0, T));
      f << line;
    }
    if (!f) throw io_error("write failed for T sweep csv: " + t_csv);
  }
}

}  // namespace attnsteer
