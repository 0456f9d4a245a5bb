// Command-line front end: dataset generation, toy training, single-sample
// steering with artifact dumps, ROC evaluation, the overfitting ablation, and
// a quick numerical self-test.
//
// Exit codes: 0 success, 1 usage, 2 numeric failure, 3 I/O failure.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include <attnsteer/attnsteer.hpp>
#include <attnsteer/gradcheck.hpp>

using namespace attnsteer;

namespace {

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open dataset: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed dataset json " + path + ": " + e.what());
  }
  return dataset_from_json(j);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << text;
  if (!f) throw io_error("write failed: " + path);
}

int cmd_gen(int n, uint64_t seed, int grid, const std::string& out) {
  Dataset ds = gen_dataset(n, seed, grid);
  nlohmann::json j = dataset_to_json(ds);
  write_text(out, j.dump(2) + "\n");
  std::printf("wrote %s: n=%d grid=%d digest=%s\n", out.c_str(), n, grid,
              dataset_digest(ds).c_str());
  return 0;
}

int cmd_train(const std::string& dataset, int epochs, double lr, uint64_t seed,
              const std::string& out, const std::string& loss_csv) {
  Dataset ds = load_dataset(dataset);
  ModelConfig cfg;
  cfg.grid = ds.grid;
  ModelParams params = init_model(cfg);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr = lr;
  tc.seed = seed;
  TrainReport rep = train_toy(params, ds, tc);
  save_checkpoint(params, out);
  if (!loss_csv.empty()) write_loss_csv(rep, loss_csv);
  std::printf("trained %d steps: loss %.4f -> %.4f, checkpoint %s\n", rep.steps,
              rep.initial_loss, rep.final_loss, out.c_str());
  return 0;
}

int cmd_steer(const std::string& model, const std::string& dataset, int image_idx,
              const std::string& prompt_path, const std::string& optimizer,
              const std::string& config_path, const std::string& trace_path,
              const std::string& heatmap_path) {
  ModelParams params = load_checkpoint(model);
  Dataset ds = load_dataset(dataset);
  require(image_idx >= 0 && image_idx < static_cast<int>(ds.samples.size()),
          "image-idx " + std::to_string(image_idx) + " outside dataset of " +
              std::to_string(ds.samples.size()));
  const RocSample& sample = ds.samples[static_cast<size_t>(image_idx)];

  VisualPrompt prompt = sample.prompt;
  if (!prompt_path.empty()) {
    std::ifstream f(prompt_path);
    if (!f) throw io_error("cannot open prompt: " + prompt_path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw io_error("malformed prompt json " + prompt_path + ": " + e.what());
    }
    prompt = prompt_from_json(j);
  }

  bool use_adam = optimizer == "adam";
  SteeringConfig cfg =
      use_adam ? adam_defaults(params.cfg.n_layers) : gd_defaults(params.cfg.n_layers);
  cfg.energy_mode = energy_mode_for(prompt);
  if (!config_path.empty())
    cfg = apply_steering_config(parse_flat_config_file(config_path), cfg);
  cfg.aggregation.validate(params.cfg.n_layers);

  Tensor feats = sample.image.features();
  SteerResult res = use_adam ? steer_adam(params, feats, sample.question, prompt, cfg)
                             : steer_gd(params, feats, sample.question, prompt, cfg);

  if (!trace_path.empty()) write_trace_csv(res.trace, trace_path);
  if (!heatmap_path.empty()) {
    Graph g;
    ForwardResult fr =
        run_frozen(g, params, feats, sample.question, g.constant(res.p_v));
    Tensor agg = aggregate(g, fr, cfg.aggregation, params.cfg.grid).value();
    dump_heatmap(agg, heatmap_path);
  }

  DecodeConfig dc;
  DecodeResult dec = prompt_debias_decode(params, feats, sample.question, res.p_v,
                                          cfg.gamma, dc);
  nlohmann::json out{
      {"optimizer", use_adam ? "adam" : "gd"},
      {"prompt", prompt_to_json(prompt)},
      {"initial_energy", res.trace.initial_energy()},
      {"final_energy", res.trace.final_energy()},
      {"stop", stop_reason_name(res.trace.stop)},
      {"iterations", res.trace.records.size()},
      {"decode", decode_result_json(dec, "adam+debias", vocab::token_name,
                                    nlohmann::json{{"gamma", cfg.gamma}})}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& model, const std::string& dataset, const std::string& modes,
             const std::string& report_path, double eta, double gamma) {
  ModelParams params = load_checkpoint(model);
  Dataset ds = load_dataset(dataset);
  EvalOptions opt = EvalOptions::defaults(params.cfg.n_layers);
  opt.eta = eta;
  opt.gamma = gamma;
  EvalReport rep = eval_roc(params, ds, parse_modes(modes), opt);
  nlohmann::json j = eval_report_json(rep);
  if (!report_path.empty()) write_text(report_path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  std::fprintf(stderr, "eval wall time %.1f s\n", rep.wall_seconds);
  return 0;
}

int cmd_ablate(const std::string& model, const std::string& dataset, int n,
               const std::string& alpha_csv, const std::string& iters_csv) {
  ModelParams params = load_checkpoint(model);
  Dataset ds = load_dataset(dataset);
  run_ablation(params, ds, alpha_csv, iters_csv, n);
  std::printf("wrote %s and %s\n", alpha_csv.c_str(), iters_csv.c_str());
  return 0;
}

// Gradient check plus the formula and optimizer oracles, compressed into one
// self-contained pass.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](bool ok, const char* what) {
    std::printf("%s %s\n", ok ? "ok  " : "FAIL", what);
    if (!ok) ++failures;
  };

  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 1;
  cfg.grid = 4;
  cfg.max_seq = 32;
  cfg.seed = 5;
  ModelParams params = init_model(cfg);
  Tensor feats = Rng(6).gaussian_tensor({cfg.n_vis(), cfg.feat_dim}, 1.0);
  std::vector<int> text = roc_question();

  double worst = 0.0;
  for (uint64_t seed = 0; seed < 4; ++seed) {
    for (EnergyMode mode : {EnergyMode::Hard, EnergyMode::Soft}) {
      VisualPrompt prompt = mode == EnergyMode::Hard
                                ? VisualPrompt::box(0.0, 0.0, 0.5, 0.5)
                                : VisualPrompt::point(0.4, 0.6);
      EnergyTarget target = make_energy_target(prompt, cfg.grid, mode);
      AggregationSpec spec =
          seed % 2 == 0 ? context_token_spec(cfg.n_layers) : answer_start_spec(cfg.n_layers);
      Tensor p_v = Rng(100 + seed).gaussian_tensor({cfg.n_vis(), cfg.d_model}, 0.1);
      EnergyEval ev = energy_gradient(params, feats, text, target, spec, p_v);
      Rng pick(200 + seed);
      for (int probe = 0; probe < 5; ++probe) {
        int idx = pick.uniform_int(0, static_cast<int>(p_v.data.size()) - 1);
        const double h = 1e-5;
        Tensor plus = p_v, minus = p_v;
        plus.data[static_cast<size_t>(idx)] += h;
        minus.data[static_cast<size_t>(idx)] -= h;
        double fd = (energy_only(params, feats, text, target, spec, plus).value -
                     energy_only(params, feats, text, target, spec, minus).value) /
                    (2.0 * h);
        worst = std::max(worst, rel_err(ev.grad.data[static_cast<size_t>(idx)], fd));
      }
    }
  }
  check(worst < 1e-4, "energy gradient vs central finite differences");

  Rng rng(7);
  bool hard_ok = true, soft_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor a = Tensor::zeros({4, 4});
    for (double& v : a.data) v = rng.uniform() + 1e-6;
    RegionMask r;
    r.g = 4;
    r.cells.assign(16, 0);
    while (r.count == 0)
      for (size_t i = 0; i < 16; ++i) {
        r.cells[i] = rng.uniform() < 0.3 ? 1 : 0;
        r.count += r.cells[i];
      }
    double in = 0, total = 0;
    for (size_t i = 0; i < 16; ++i) {
      total += a.data[i];
      if (r.cells[i]) in += a.data[i];
    }
    double want = (1.0 - in / total) * (1.0 - in / total);
    hard_ok = hard_ok && std::fabs(hard_energy(a, r).value - want) < 1e-12;

    SoftWeightMap w;
    w.weights = Tensor::zeros({4, 4});
    for (double& v : w.weights.data) v = rng.uniform();
    double num = 0;
    for (size_t i = 0; i < 16; ++i) num += w.weights.data[i] * a.data[i];
    double ratio = std::min(1.0, std::max(0.0, num / total));
    double want_soft = (1.0 - ratio) * (1.0 - ratio);
    soft_ok = soft_ok && std::fabs(soft_energy(a, w).value - want_soft) < 1e-12;
  }
  check(hard_ok, "hard energy vs scalar oracle");
  check(soft_ok, "soft energy vs scalar oracle");

  bool dt_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> pts;
    int k = 1 + static_cast<int>(rng.uniform() * 4);
    for (int i = 0; i < k; ++i) pts.emplace_back(rng.uniform(), rng.uniform());
    Tensor d = distance_transform(VisualPrompt::scribble(pts), 8);
    for (int row = 0; row < 8 && dt_ok; ++row)
      for (int col = 0; col < 8; ++col) {
        double cx = (col + 0.5) / 8.0, cy = (row + 0.5) / 8.0, best = 1e30;
        for (auto& p : pts) {
          double dx = cx - p.first, dy = cy - p.second;
          best = std::min(best, std::sqrt(dx * dx + dy * dy));
        }
        if (d.at(row, col) != best) {
          dt_ok = false;
          break;
        }
      }
  }
  check(dt_ok, "distance transform vs brute-force nearest point");

  bool adam_ok = true;
  {
    Tensor x = Tensor::zeros({2, 3});
    AdamState st(x.shape);
    std::vector<double> ox(6, 0), om(6, 0), ov(6, 0);
    for (int step = 1; step <= 100; ++step) {
      Tensor g = rng.gaussian_tensor(x.shape, 1.0);
      adam_step(st, x, g, 0.03, 0.9, 0.999, 1e-8);
      for (size_t i = 0; i < 6; ++i) {
        om[i] = 0.9 * om[i] + 0.1 * g.data[i];
        ov[i] = 0.999 * ov[i] + 0.001 * g.data[i] * g.data[i];
        double mhat = om[i] / (1.0 - std::pow(0.9, step));
        double vhat = ov[i] / (1.0 - std::pow(0.999, step));
        ox[i] -= 0.03 * mhat / (std::sqrt(vhat) + 1e-8);
        adam_ok = adam_ok && std::fabs(x.data[i] - ox[i]) < 1e-12;
      }
    }
  }
  check(adam_ok, "adam recursion vs scalar oracle");

  {
    DecodeConfig dc;
    dc.max_new_tokens = 3;
    RegionMask region = rasterize(VisualPrompt::box(0, 0, 0.5, 0.5), cfg.grid);
    DecodeResult plain = greedy_decode(params, feats, text, dc);
    DecodeResult edit0 = edit_attention_decode(params, feats, text, region, 0.0,
                                               BiasSteps::FirstOnly, dc);
    check(plain.tokens == edit0.tokens, "eta=0 edit-attention equals plain decode");

    Tensor p_v = Rng(9).gaussian_tensor({cfg.n_vis(), cfg.d_model}, 0.2);
    DecodeResult steered = greedy_decode(params, feats, text, dc, &p_v);
    DecodeResult debias0 = prompt_debias_decode(params, feats, text, p_v, 0.0, dc);
    check(steered.tokens == debias0.tokens, "gamma=0 debias equals steered decode");

    Tensor zero = Tensor::zeros({cfg.n_vis(), cfg.d_model});
    DecodeResult pv0 = greedy_decode(params, feats, text, dc, &zero);
    bool bitwise = plain.step_logits.size() == pv0.step_logits.size();
    for (size_t s = 0; bitwise && s < plain.step_logits.size(); ++s)
      bitwise = plain.step_logits[s].data == pv0.step_logits[s].data;
    check(bitwise, "p_v=0 equals no-latent forward bit-exactly");
  }

  std::printf("%s\n", failures == 0 ? "selftest passed" : "selftest FAILED");
  return failures == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"test-time attention steering for a toy multimodal decoder"};
  app.require_subcommand(1);

  int gen_n = 200, gen_grid = 8;
  uint64_t gen_seed = 7;
  std::string gen_out = "dataset.json";
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic ROC dataset");
  gen->add_option("--n", gen_n, "sample count");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--grid", gen_grid, "grid side length");
  gen->add_option("--out", gen_out, "output json path");

  std::string train_dataset, train_out = "model.bin", train_loss_csv;
  int train_epochs = 4;
  double train_lr = 3e-3;
  uint64_t train_seed = 7;
  CLI::App* train = app.add_subcommand("train", "train the toy decoder on captions");
  train->add_option("--dataset", train_dataset, "dataset json")->required();
  train->add_option("--epochs", train_epochs, "passes over the dataset");
  train->add_option("--lr", train_lr, "peak learning rate");
  train->add_option("--seed", train_seed, "training shuffle/caption seed");
  train->add_option("--out", train_out, "checkpoint path");
  train->add_option("--loss-csv", train_loss_csv, "optional per-step loss curve");

  std::string steer_model, steer_dataset, steer_prompt, steer_config, steer_trace,
      steer_heatmap;
  std::string steer_opt = "gd";
  int steer_idx = 0;
  CLI::App* steer = app.add_subcommand("steer", "optimize a latent for one sample");
  steer->add_option("--model", steer_model, "checkpoint")->required();
  steer->add_option("--dataset", steer_dataset, "dataset json supplying the image")
      ->required();
  steer->add_option("--image-idx", steer_idx, "sample index into the dataset");
  steer->add_option("--prompt", steer_prompt, "prompt json overriding the sample's own");
  steer->add_option("--optimizer", steer_opt, "gd or adam")
      ->check(CLI::IsMember({"gd", "adam"}));
  steer->add_option("--config", steer_config, "flat key=value steering overrides");
  steer->add_option("--trace", steer_trace, "energy trace csv");
  steer->add_option("--heatmap", steer_heatmap, "steered aggregated-attention pgm");

  std::string eval_model, eval_dataset, eval_report;
  std::string eval_modes = "plain,edit,gd,adam,adam+debias";
  double eval_eta = 10.0, eval_gamma = 0.7;
  CLI::App* eval = app.add_subcommand("eval", "run the ROC evaluation");
  eval->add_option("--model", eval_model, "checkpoint")->required();
  eval->add_option("--dataset", eval_dataset, "dataset json")->required();
  eval->add_option("--modes", eval_modes, "comma list: plain,edit,gd,adam,adam+debias");
  eval->add_option("--report", eval_report, "report json path");
  eval->add_option("--eta", eval_eta, "edit-attention bias");
  eval->add_option("--gamma", eval_gamma, "debias contrast weight");

  std::string abl_model, abl_dataset, abl_alpha = "alpha_sweep.csv",
                                      abl_iters = "iters_sweep.csv";
  int abl_n = 40;
  CLI::App* ablate = app.add_subcommand("ablate", "alpha and iteration-count sweeps");
  ablate->add_option("--model", abl_model, "checkpoint")->required();
  ablate->add_option("--dataset", abl_dataset, "dataset json")->required();
  ablate->add_option("--n", abl_n, "samples per sweep point");
  ablate->add_option("--alpha-csv", abl_alpha, "alpha sweep output");
  ablate->add_option("--iters-csv", abl_iters, "iteration sweep output");

  app.add_subcommand("selftest", "gradient checks and formula oracles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_n, gen_seed, gen_grid, gen_out);
    if (train->parsed())
      return cmd_train(train_dataset, train_epochs, train_lr, train_seed, train_out,
                       train_loss_csv);
    if (steer->parsed())
      return cmd_steer(steer_model, steer_dataset, steer_idx, steer_prompt, steer_opt,
                       steer_config, steer_trace, steer_heatmap);
    if (eval->parsed())
      return cmd_eval(eval_model, eval_dataset, eval_modes, eval_report, eval_eta,
                      eval_gamma);
    if (ablate->parsed())
      return cmd_ablate(abl_model, abl_dataset, abl_n, abl_alpha, abl_iters);
    return cmd_selftest();
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
