#pragma once

#include <algorithm>
#include <functional>

#include "attnsteer/steering.hpp"

namespace attnsteer {

// Autoregressive generation against the frozen model. No KV cache: every step
// re-runs the full forward, which keeps the dual-forward debias mode trivially
// consistent. All modes are greedy; ties go to the lowest token id so runs are
// reproducible down to the bit.

struct DecodeConfig {
  int max_new_tokens = 8;
  int stop_token = 0;

  void validate() const {
    require(max_new_tokens >= 1, "decode config: max_new_tokens must be >= 1");
  }
};

enum class BiasSteps { FirstOnly, All };

struct DecodeResult {
  std::vector<int> tokens;                  // generated ids, stop token included
  std::vector<Tensor> step_logits;          // the logits each argmax acted on
  std::vector<Tensor> step_logits_with;     // debias: steered branch
  std::vector<Tensor> step_logits_without;  // debias: unsteered branch
  AttentionStack first_attn;                // stack from the first decode step
  AttentionStack final_attn;                // stack from the last decode step
  SteeringTrace trace;                      // filled by callers that steered first
  bool has_trace = false;
};

inline int argmax_lowest(const Tensor& logits) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(logits.data.size()); ++j)
    if (logits.data[static_cast<size_t>(j)] > logits.data[static_cast<size_t>(best)])
      best = j;
  return best;
}

/// Greedy decoding, optionally with a fixed latent p_v on the visual tokens.
inline DecodeResult greedy_decode(const ModelParams& params, const Tensor& feats,
                                  const std::vector<int>& text, const DecodeConfig& cfg,
                                  const Tensor* p_v = nullptr) {
  cfg.validate();
  DecodeResult out;
  std::vector<int> history = text;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    Graph g;
    std::optional<Var> pv;
    if (p_v != nullptr) pv = g.constant(*p_v);
    ForwardResult fr = run_frozen(g, params, feats, history, pv);
    Tensor logits = next_token_logits(fr);
    if (step == 0) out.first_attn = snapshot_attn(fr);
    out.final_attn = snapshot_attn(fr);
    int tok = argmax_lowest(logits);
    out.step_logits.push_back(std::move(logits));
    out.tokens.push_back(tok);
    history.push_back(tok);
    if (tok == cfg.stop_token) break;
  }
  return out;
}

/// Greedy decoding with the pre-softmax attention bias +eta on every key
/// column inside the region, applied at the first decode step only or at all
/// steps. eta=0 reduces to plain greedy decoding.
inline DecodeResult edit_attention_decode(const ModelParams& params, const Tensor& feats,
                                          const std::vector<int>& text,
                                          const RegionMask& region, double eta,
                                          BiasSteps steps, const DecodeConfig& cfg) {
  cfg.validate();
  require(std::isfinite(eta), "edit_attention: eta must be finite");
  require(region.count >= 1, "edit_attention: empty region");
  require(region.g == params.cfg.grid,
          "edit_attention: region grid " + std::to_string(region.g) +
              " does not match model grid " + std::to_string(params.cfg.grid));
  std::vector<double> bias(static_cast<size_t>(params.cfg.n_vis()), 0.0);
  for (size_t i = 0; i < bias.size(); ++i)
    if (region.cells[i]) bias[i] = eta;

  DecodeResult out;
  std::vector<int> history = text;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    bool biased = steps == BiasSteps::All || step == 0;
    Graph g;
    ForwardResult fr =
        run_frozen(g, params, feats, history, std::nullopt, biased ? &bias : nullptr);
    Tensor logits = next_token_logits(fr);
    if (step == 0) out.first_attn = snapshot_attn(fr);
    out.final_attn = snapshot_attn(fr);
    int tok = argmax_lowest(logits);
    out.step_logits.push_back(std::move(logits));
    out.tokens.push_back(tok);
    history.push_back(tok);
    if (tok == cfg.stop_token) break;
  }
  return out;
}

/// Contrastive decoding: at every step the steered branch (with p_v) and the
/// unsteered branch (same image and text, no latent) each produce logits, and
/// the argmax runs over (1+gamma)*steered - gamma*unsteered. Both branches
/// consume the identical generated history.
inline DecodeResult prompt_debias_decode(const ModelParams& params, const Tensor& feats,
                                         const std::vector<int>& text, const Tensor& p_v,
                                         double gamma, const DecodeConfig& cfg) {
  cfg.validate();
  require(gamma >= 0.0, "prompt_debias: gamma must be >= 0");
  DecodeResult out;
  std::vector<int> history = text;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    Graph g_with;
    std::optional<Var> pv = g_with.constant(p_v);
    ForwardResult fr_with = run_frozen(g_with, params, feats, history, pv);
    Tensor with_logits = next_token_logits(fr_with);

    Graph g_without;
    ForwardResult fr_without = run_frozen(g_without, params, feats, history);
    Tensor without_logits = next_token_logits(fr_without);

    Tensor combined = Tensor::zeros(with_logits.shape);
    for (size_t j = 0; j < combined.data.size(); ++j)
      combined.data[j] =
          (1.0 + gamma) * with_logits.data[j] - gamma * without_logits.data[j];

    if (step == 0) out.first_attn = snapshot_attn(fr_with);
    out.final_attn = snapshot_attn(fr_with);
    int tok = argmax_lowest(combined);
    out.step_logits.push_back(std::move(combined));
    out.step_logits_with.push_back(std::move(with_logits));
    out.step_logits_without.push_back(std::move(without_logits));
    out.tokens.push_back(tok);
    history.push_back(tok);
    if (tok == cfg.stop_token) break;
  }
  return out;
}

/// JSON export: mode, tokens, detokenized text, per-step top-5 logits, and an
/// opaque config echo supplied by the caller.
inline nlohmann::json decode_result_json(const DecodeResult& r, const char* mode,
                                         const std::function<std::string(int)>& token_name,
                                         nlohmann::json config_echo) {
  nlohmann::json steps = nlohmann::json::array();
  for (const Tensor& logits : r.step_logits) {
    std::vector<int> order(logits.data.size());
    for (size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return logits.data[static_cast<size_t>(a)] > logits.data[static_cast<size_t>(b)];
    });
    nlohmann::json top = nlohmann::json::array();
    for (size_t k = 0; k < order.size() && k < 5; ++k)
      top.push_back({{"token", order[k]},
                     {"name", token_name(order[k])},
                     {"logit", logits.data[static_cast<size_t>(order[k])]}});
    steps.push_back(std::move(top));
  }
  std::string detok;
  for (size_t i = 0; i < r.tokens.size(); ++i) {
    if (i > 0) detok += ' ';
    detok += token_name(r.tokens[i]);
  }
  return nlohmann::json{{"mode", mode},
                        {"tokens", r.tokens},
                        {"text", detok},
                        {"top5_per_step", std::move(steps)},
                        {"config", std::move(config_echo)}};
}

}  // namespace attnsteer
