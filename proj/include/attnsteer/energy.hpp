#pragma once

#include "attnsteer/model.hpp"
#include "attnsteer/visprompt.hpp"

namespace attnsteer {

// Energies over aggregated attention. The aggregated map A is a g x g summary
// of how much the relevant query rows attend to each visual token; the energy
// is the squared shortfall of the (possibly soft-weighted) in-region share of
// that mass. Everything here stays on the graph so the energy differentiates
// back to the latent p_v.

enum class AggregationMode { ContextToken, AnswerStart };

struct AggregationSpec {
  AggregationMode mode = AggregationMode::ContextToken;
  int layer_lo = 0;  // inclusive
  int layer_hi = 0;  // inclusive

  void validate(int n_layers) const {
    require(0 <= layer_lo && layer_lo <= layer_hi && layer_hi < n_layers,
            "aggregation: layer window [" + std::to_string(layer_lo) + "," +
                std::to_string(layer_hi) + "] invalid for " + std::to_string(n_layers) +
                " layers");
  }
};

/// All layers, text-prompt query rows.
inline AggregationSpec context_token_spec(int n_layers) {
  return AggregationSpec{AggregationMode::ContextToken, 0, n_layers - 1};
}

/// Middle half of the stack, answer-start query row. The window is the
/// proportional transplant of a deep decoder's mid layers onto toy depth.
inline AggregationSpec answer_start_spec(int n_layers) {
  int lo = (n_layers + 3) / 4;      // ceil(L/4)
  int hi = (3 * n_layers) / 4;      // floor(3L/4)
  lo = std::min(lo, n_layers - 1);
  hi = std::min(hi, n_layers - 1);
  if (hi < lo) hi = lo;
  return AggregationSpec{AggregationMode::AnswerStart, lo, hi};
}

/// Mean over selected layers, all heads, and the mode's query rows of the
/// visual-key attention columns, reshaped to the g x g token grid.
inline Var aggregate(Graph& g, const ForwardResult& fr, const AggregationSpec& spec,
                     int grid) {
  const int n_layers = static_cast<int>(fr.attn.size());
  spec.validate(n_layers);
  const SeqLayout& lay = fr.layout;
  require(grid * grid == lay.n_v, "aggregate: grid " + std::to_string(grid) +
                                      " does not square to " + std::to_string(lay.n_v) +
                                      " visual tokens");
  require(lay.n_t >= 1, "aggregate: layout has no text tokens");
  int row_lo, row_hi;
  if (spec.mode == AggregationMode::ContextToken) {
    row_lo = lay.n_v;
    row_hi = lay.n_v + lay.n_t;
  } else {
    row_lo = lay.answer_start();
    row_hi = row_lo + 1;
  }
  Var acc;
  int n_maps = 0;
  for (int l = spec.layer_lo; l <= spec.layer_hi; ++l) {
    for (const Var& attn : fr.attn[static_cast<size_t>(l)]) {
      Var rows = slice(attn, row_lo, row_hi, 0, lay.n_v);
      Var cols = row_hi - row_lo == 1 ? rows : sum_rows(rows);
      acc = n_maps == 0 ? cols : add(acc, cols);
      ++n_maps;
    }
  }
  double divisor = static_cast<double>(n_maps) * (row_hi - row_lo);
  return reshape(scale(acc, 1.0 / divisor), {grid, grid});
}

// --- energies ------------------------------------------------------------------

struct EnergyValue {
  double value = 0.0;
  double mass_ratio = 0.0;  // the ratio inside the square, pre-clamp
};

namespace detail {

inline Var mass_total(Graph& g, Var a, const char* what) {
  Var total = sum_all(a);
  if (total.value().data[0] <= 0.0)
    throw numeric_error(std::string(what) + ": aggregated attention has zero total mass");
  return total;
}

}  // namespace detail

/// (1 - in-region mass / total mass)^2 on the graph. `ratio_out`, when given,
/// receives the ratio node for diagnostics.
inline Var hard_energy_var(Graph& g, Var a, const RegionMask& r, Var* ratio_out = nullptr) {
  require(a.value().shape == std::vector<int>({r.g, r.g}),
          "hard_energy: map is " + a.value().shape_str() + " but region grid is " +
              std::to_string(r.g));
  require(r.count >= 1, "hard_energy: empty region");
  Tensor mask = Tensor::zeros({r.g, r.g});
  for (size_t i = 0; i < r.cells.size(); ++i) mask.data[i] = r.cells[i] ? 1.0 : 0.0;
  Var in_mass = sum_all(mul(a, g.constant(std::move(mask))));
  Var ratio = divide(in_mass, detail::mass_total(g, a, "hard_energy"));
  if (ratio_out != nullptr) *ratio_out = ratio;
  Var shortfall = sub(g.constant_scalar(1.0), ratio);
  return mul(shortfall, shortfall);
}

/// (1 - clamp01(sum_i w_i A_i / sum_i A_i))^2 on the graph. The clamp only
/// bites in raw-weight mode, where the pdf peak can push the ratio above 1.
inline Var soft_energy_var(Graph& g, Var a, const SoftWeightMap& w, Var* ratio_out = nullptr) {
  require(a.value().same_shape(w.weights),
          "soft_energy: map is " + a.value().shape_str() + " but weights are " +
              w.weights.shape_str());
  Var weighted = sum_all(mul(a, g.constant(w.weights)));
  Var ratio = divide(weighted, detail::mass_total(g, a, "soft_energy"));
  if (ratio_out != nullptr) *ratio_out = ratio;
  Var shortfall = sub(g.constant_scalar(1.0), clamp01(ratio));
  return mul(shortfall, shortfall);
}

/// Plain-tensor evaluation of the hard energy.
inline EnergyValue hard_energy(const Tensor& a, const RegionMask& r) {
  Graph g;
  Var av = g.constant(a);
  Var ratio;
  Var e = hard_energy_var(g, av, r, &ratio);
  return EnergyValue{e.value().data[0], ratio.value().data[0]};
}

/// Plain-tensor evaluation of the soft energy.
inline EnergyValue soft_energy(const Tensor& a, const SoftWeightMap& w) {
  Graph g;
  Var av = g.constant(a);
  Var ratio;
  Var e = soft_energy_var(g, av, w, &ratio);
  return EnergyValue{e.value().data[0], ratio.value().data[0]};
}

// --- full-pipeline gradient ------------------------------------------------------

enum class EnergyMode { Hard, Soft };

/// Box and mask prompts define a crisp region; scribbles and points fall back
/// to the Gaussian-weighted soft target.
inline EnergyMode energy_mode_for(const VisualPrompt& prompt) {
  return std::holds_alternative<BoxPrompt>(prompt.shape) ||
                 std::holds_alternative<MaskPrompt>(prompt.shape)
             ? EnergyMode::Hard
             : EnergyMode::Soft;
}

/// Prompt rasterized once into whichever target the energy mode needs, so the
/// steering loop does not redo geometry every iteration.
struct EnergyTarget {
  EnergyMode mode = EnergyMode::Hard;
  RegionMask region;      // hard mode, and mass diagnostics in both modes
  SoftWeightMap weights;  // soft mode only
};

inline EnergyTarget make_energy_target(const VisualPrompt& prompt, int grid, EnergyMode mode,
                                       double sigma = 0.1, bool normalized = true) {
  EnergyTarget t;
  t.mode = mode;
  t.region = rasterize(prompt, grid);
  if (mode == EnergyMode::Soft)
    t.weights = soft_weight_map(distance_transform(prompt, grid), sigma, normalized);
  return t;
}

inline Var energy_var(Graph& g, Var a, const EnergyTarget& target, Var* ratio_out = nullptr) {
  return target.mode == EnergyMode::Hard ? hard_energy_var(g, a, target.region, ratio_out)
                                         : soft_energy_var(g, a, target.weights, ratio_out);
}

struct EnergyEval {
  double value = 0.0;
  double mass_ratio = 0.0;
  double in_region_mass = 0.0;  // unweighted hard-mask mass of the aggregated map
  Tensor grad;                  // dE/dp_v, [n_v x d_model]
};

/// One frozen forward, one backward: the full-pipeline gradient of the
/// selected energy with respect to p_v. Model parameters are graph constants
/// and cannot receive gradients. `loss_scale` multiplies the energy before
/// differentiation (the Adam loop optimizes alpha*E); the reported value stays
/// the unscaled energy.
inline EnergyEval energy_gradient(const ModelParams& params, const Tensor& feats,
                                  const std::vector<int>& text, const EnergyTarget& target,
                                  const AggregationSpec& spec, const Tensor& p_v,
                                  double loss_scale = 1.0) {
  Graph g;
  Tensor latent = p_v;
  latent.requires_grad = true;
  latent.zero_grad();
  Var pvar = g.leaf(latent);
  ForwardResult fr = run_frozen(g, params, feats, text, pvar);
  Var a = aggregate(g, fr, spec, params.cfg.grid);
  Var ratio;
  Var e = energy_var(g, a, target, &ratio);
  Var loss = loss_scale == 1.0 ? e : scale(e, loss_scale);

  EnergyEval out;
  out.value = e.value().data[0];
  out.mass_ratio = ratio.value().data[0];
  double in = 0.0, total = 0.0;
  const Tensor& av = a.value();
  for (size_t i = 0; i < av.data.size(); ++i) {
    total += av.data[i];
    if (target.region.cells[i]) in += av.data[i];
  }
  out.in_region_mass = total > 0.0 ? in / total : 0.0;

  g.backward(loss);
  out.grad = Tensor::zeros(p_v.shape);
  out.grad.data = latent.grad;
  return out;
}

/// Energy and mass diagnostics without the backward sweep, for trace records
/// after the final update.
inline EnergyEval energy_only(const ModelParams& params, const Tensor& feats,
                              const std::vector<int>& text, const EnergyTarget& target,
                              const AggregationSpec& spec, const Tensor& p_v) {
  Graph g;
  Tensor latent = p_v;
  latent.requires_grad = false;
  Var pvar = g.constant(latent);
  ForwardResult fr = run_frozen(g, params, feats, text, pvar);
  Var a = aggregate(g, fr, spec, params.cfg.grid);
  Var ratio;
  Var e = energy_var(g, a, target, &ratio);
  EnergyEval out;
  out.value = e.value().data[0];
  out.mass_ratio = ratio.value().data[0];
  double in = 0.0, total = 0.0;
  const Tensor& av = a.value();
  for (size_t i = 0; i < av.data.size(); ++i) {
    total += av.data[i];
    if (target.region.cells[i]) in += av.data[i];
  }
  out.in_region_mass = total > 0.0 ? in / total : 0.0;
  out.grad = Tensor::zeros(p_v.shape);
  return out;
}

}  // namespace attnsteer
