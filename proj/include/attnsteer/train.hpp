#pragma once

#include <map>

#include "attnsteer/steering.hpp"
#include "attnsteer/synth.hpp"

namespace attnsteer {

// Toy training: next-token cross entropy on generated captions, Adam over all
// parameter blocks. Each step batches a few images and draws a couple of
// captions per image, so one gradient sees the same scene described at
// different regions with different colors; that contrast is what pushes color
// prediction through location-conditioned attention instead of a per-token
// shortcut. The captions mix located ("at region3") and location-free ("at
// here") forms so the model both learns the region vocabulary and keeps the
// here-question answerable from visual attention alone.
//
// Left to its own devices the decoder still prefers the shortcut: grammar rows
// are learnable without ever looking at the image, and the color row then
// settles for the marginal color distribution. The guide term breaks that
// local optimum. While a caption is being scored, a bias of strength eta is
// added to the pre-softmax attention scores of the captioned object's cells,
// handing the model the text->region routing for free so the color readout
// can form on top of it. The schedule has three phases over training: hold
// eta at guide_eta while the readout forms, descend to guide_mid so the
// readout keeps working at realistic attention levels, then anneal to zero so
// the finished model runs unassisted.

struct TrainConfig {
  int epochs = 4;             // one epoch walks every dataset image once
  double lr = 3e-3;           // peak Adam step size
  int warmup_steps = 150;     // linear learning-rate ramp from zero
  double clip_norm = 1.0;     // global gradient-norm cap, 0 disables
  int batch_images = 4;       // images contributing to one optimizer step
  int captions_per_image = 2; // captions drawn per image, objects picked at random
  double p_here = 0.25;       // chance a caption hides the location behind "here"
  double guide_eta = 6.0;     // initial attention-guide strength, 0 disables
  double guide_hold = 0.35;   // fraction of steps held at full strength
  double guide_mid = 1.0;     // strength reached at the end of the descent
  double guide_release = 0.6; // fraction where the final anneal to zero begins
  uint64_t seed = 7;
  int report_window = 50;     // steps averaged into the initial/final loss figures

  void validate() const {
    require(epochs >= 0, "train config: epochs must be >= 0");
    require(lr > 0.0, "train config: lr must be positive");
    require(warmup_steps >= 0, "train config: warmup_steps must be >= 0");
    require(clip_norm >= 0.0, "train config: clip_norm must be >= 0");
    require(batch_images >= 1, "train config: batch_images must be >= 1");
    require(captions_per_image >= 1, "train config: captions_per_image must be >= 1");
    require(p_here >= 0.0 && p_here <= 1.0, "train config: p_here must lie in [0,1]");
    require(guide_eta >= 0.0, "train config: guide_eta must be >= 0");
    require(guide_mid >= 0.0, "train config: guide_mid must be >= 0");
    require(guide_hold >= 0.0 && guide_release < 1.0 && guide_hold <= guide_release,
            "train config: need 0 <= guide_hold <= guide_release < 1");
    require(report_window >= 1, "train config: report_window must be >= 1");
  }
};

struct TrainReport {
  std::vector<double> losses;  // one cross-entropy value per optimizer step
  double initial_loss = 0.0;   // mean of the first report_window steps
  double final_loss = 0.0;     // mean of the last report_window steps
  int steps = 0;
};

inline void write_loss_csv(const TrainReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open loss csv for writing: " + path);
  f << "step,loss\n";
  char line[64];
  for (size_t i = 0; i < report.losses.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.17g\n", i, report.losses[i]);
    f << line;
  }
  if (!f) throw io_error("write failed for loss csv: " + path);
}

/// Guide strength for one step of the three-phase schedule, as a function of
/// the step's position frac in [0,1].
inline double guide_strength(const TrainConfig& cfg, double frac) {
  if (frac <= cfg.guide_hold) return cfg.guide_eta;
  if (frac <= cfg.guide_release)
    return cfg.guide_eta + (cfg.guide_mid - cfg.guide_eta) * (frac - cfg.guide_hold) /
                               (cfg.guide_release - cfg.guide_hold);
  return std::max(0.0, cfg.guide_mid * (1.0 - (frac - cfg.guide_release) /
                                                  (1.0 - cfg.guide_release)));
}

/// Train in place on captions drawn from the dataset's images. Every epoch
/// shuffles the image order; one optimizer step per batch_images images, with
/// the tail batch wrapping around. Aborts with a diagnostic if the loss stops
/// being finite.
inline TrainReport train_toy(ModelParams& params, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  require(!ds.samples.empty(), "train_toy: empty dataset");
  require(ds.grid == params.cfg.grid,
          "train_toy: dataset grid " + std::to_string(ds.grid) + " vs model grid " +
              std::to_string(params.cfg.grid));
  require(params.cfg.feat_dim == kFeatDim,
          "train_toy: model feat_dim must be " + std::to_string(kFeatDim));

  params.for_each_block([](const std::string&, Tensor& t) {
    t.requires_grad = true;
    t.zero_grad();
  });
  std::map<std::string, AdamState> opt;
  params.for_each_block([&](const std::string& name, Tensor& t) {
    opt.emplace(name, AdamState(t.shape));
  });

  Rng rng(cfg.seed);
  TrainReport report;
  const int n = static_cast<int>(ds.samples.size());
  const int grid = ds.grid;
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  const long steps_per_epoch = (n + cfg.batch_images - 1) / cfg.batch_images;
  const long total_steps = steps_per_epoch * cfg.epochs;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);
    for (long b = 0; b < steps_per_epoch; ++b) {
      const long step = report.steps;
      double frac = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 1.0;
      double eta = guide_strength(cfg, frac);
      double lr_t = step < cfg.warmup_steps
                        ? cfg.lr * static_cast<double>(step + 1) / cfg.warmup_steps
                        : cfg.lr;

      Graph g;
      ParamVars pv = bind_params_leaf(g, params);
      std::optional<Var> loss_sum;
      int captions = 0;
      for (int bi = 0; bi < cfg.batch_images; ++bi) {
        int idx = order[static_cast<size_t>((b * cfg.batch_images + bi) % n)];
        const SyntheticImage& img = ds.samples[static_cast<size_t>(idx)].image;
        Var e_v = embed_image(g, pv, img.features());
        const int n_obj = static_cast<int>(img.objects.size());
        for (int ci = 0; ci < cfg.captions_per_image; ++ci) {
          int obj = rng.uniform_int(0, n_obj - 1);
          bool use_here = rng.uniform() < cfg.p_here;
          std::vector<int> caption = make_caption(img, obj, use_here);
          std::vector<double> guide(static_cast<size_t>(params.cfg.n_vis()), 0.0);
          const SceneObject& o = img.objects[static_cast<size_t>(obj)];
          for (int r = o.r0; r < o.r1; ++r)
            for (int c = o.c0; c < o.c1; ++c)
              guide[static_cast<size_t>(r * grid + c)] = eta;
          ForwardResult fr = forward(g, pv, e_v, caption, eta > 0.0 ? &guide : nullptr);
          std::vector<std::pair<int, int>> targets;
          for (size_t j = 0; j + 1 < caption.size(); ++j)
            targets.emplace_back(params.cfg.n_vis() + static_cast<int>(j), caption[j + 1]);
          Var one = cross_entropy_rows(fr.logits, targets);
          loss_sum = loss_sum ? add(*loss_sum, one) : one;
          ++captions;
        }
      }
      Var loss = scale(*loss_sum, 1.0 / captions);
      double lv = loss.value().data[0];
      if (!std::isfinite(lv))
        throw numeric_error("train_toy: loss diverged to " + std::to_string(lv) +
                            " at step " + std::to_string(report.steps));
      report.losses.push_back(lv);
      ++report.steps;

      g.backward(loss);
      double grad_sq = 0.0;
      params.for_each_block([&](const std::string&, Tensor& t) {
        for (double gv : t.grad) grad_sq += gv * gv;
      });
      double gscale = cfg.clip_norm > 0.0 && std::sqrt(grad_sq) > cfg.clip_norm
                          ? cfg.clip_norm / std::sqrt(grad_sq)
                          : 1.0;
      params.for_each_block([&](const std::string& name, Tensor& t) {
        Tensor grad = Tensor::zeros(t.shape);
        grad.data = t.grad;
        if (gscale != 1.0)
          for (double& gv : grad.data) gv *= gscale;
        adam_step(opt.at(name), t, grad, lr_t, 0.9, 0.999, 1e-8);
        t.zero_grad();
      });
    }
  }

  params.for_each_block([](const std::string&, Tensor& t) {
    t.requires_grad = false;
    t.grad.clear();
  });

  int w = std::min<int>(cfg.report_window, std::max<int>(1, report.steps));
  if (report.steps > 0) {
    double s0 = 0.0, s1 = 0.0;
    for (int i = 0; i < w; ++i) {
      s0 += report.losses[static_cast<size_t>(i)];
      s1 += report.losses[report.losses.size() - 1 - static_cast<size_t>(i)];
    }
    report.initial_loss = s0 / w;
    report.final_loss = s1 / w;
  }
  return report;
}

}  // namespace attnsteer
