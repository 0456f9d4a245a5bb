#pragma once

#include <optional>
#include <string>

#include "attnsteer/graph.hpp"

namespace attnsteer {

// Desk-scale multimodal decoder: g*g visual tokens form a prefix, text tokens
// follow, causal self-attention ties them together (LLaVA layout). Every
// layer/head attention map is recorded post-softmax so energies defined over
// them stay differentiable back to the additive visual latent.

struct ModelConfig {
  int d_model = 48;
  int n_layers = 4;
  int n_heads = 4;
  int grid = 8;        // visual tokens form a grid x grid prefix
  int feat_dim = 9;    // per-cell image feature width
  int vocab_size = 40;
  int max_seq = 96;
  uint64_t seed = 7;

  int d_k() const { return d_model / n_heads; }
  int n_vis() const { return grid * grid; }

  void validate() const {
    require(d_model >= 1 && n_layers >= 1 && n_heads >= 1,
            "model config: dimensions must be positive");
    require(d_model % n_heads == 0, "model config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " +
                                        std::to_string(n_heads));
    require(grid >= 1 && feat_dim >= 1, "model config: grid and feat_dim must be positive");
    require(vocab_size >= 2, "model config: vocab_size must be >= 2");
    require(max_seq > n_vis(), "model config: max_seq " + std::to_string(max_seq) +
                                   " leaves no room for text after " +
                                   std::to_string(n_vis()) + " visual tokens");
  }
};

struct ModelParams {
  ModelConfig cfg;

  Tensor tok_emb;   // [vocab x d]
  Tensor patch_w;   // [feat_dim x d]
  Tensor patch_b;   // [1 x d]
  Tensor pos_emb;   // [max_seq x d]

  struct Layer {
    Tensor ln1_g, ln1_b;        // [1 x d]
    Tensor wq, wk, wv, wo;      // [d x d]
    Tensor ln2_g, ln2_b;        // [1 x d]
    Tensor mlp_w1;              // [d x 4d]
    Tensor mlp_b1;              // [1 x 4d]
    Tensor mlp_w2;              // [4d x d]
    Tensor mlp_b2;              // [1 x d]
  };
  std::vector<Layer> layers;

  Tensor lnf_g, lnf_b;  // [1 x d]
  Tensor head_w;        // [d x vocab], untied from tok_emb

  /// Visit every parameter block with a stable name, in a fixed order. The
  /// checkpoint format, checksums, and the training loop all share this walk.
  template <class F>
  void for_each_block(F&& f) {
    const_cast<const ModelParams*>(this)->for_each_block(
        [&](const std::string& name, const Tensor& t) { f(name, const_cast<Tensor&>(t)); });
  }

  template <class F>
  void for_each_block(F&& f) const {
    f("tok_emb", tok_emb);
    f("patch_w", patch_w);
    f("patch_b", patch_b);
    f("pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      const Layer& L = layers[l];
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "mlp_w1", L.mlp_w1);
      f(p + "mlp_b1", L.mlp_b1);
      f(p + "mlp_w2", L.mlp_w2);
      f(p + "mlp_b2", L.mlp_b2);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("head_w", head_w);
  }
};

/// Digest of every parameter block (names and payloads). The freeze contract
/// asserts this value is unchanged across steering and decoding.
inline uint64_t params_checksum(const ModelParams& p) {
  uint64_t h = fnv1a64(&p.cfg.d_model, sizeof(int));
  int meta[5] = {p.cfg.n_layers, p.cfg.n_heads, p.cfg.grid, p.cfg.feat_dim,
                 p.cfg.vocab_size};
  h = fnv1a64(meta, sizeof(meta), h);
  p.for_each_block([&](const std::string& name, const Tensor& t) {
    h = fnv1a64(name.data(), name.size(), h);
    h = tensor_checksum(t, h);
  });
  return h;
}

/// Seeded Gaussian init, std 0.02 on all weight matrices. Norm gains start at
/// one and biases at zero so early training signal is not crushed.
inline ModelParams init_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  constexpr double kStd = 0.02;
  const int d = cfg.d_model;
  ModelParams p;
  p.cfg = cfg;
  p.tok_emb = rng.gaussian_tensor({cfg.vocab_size, d}, kStd);
  p.patch_w = rng.gaussian_tensor({cfg.feat_dim, d}, kStd);
  p.patch_b = Tensor::zeros({1, d});
  p.pos_emb = rng.gaussian_tensor({cfg.max_seq, d}, kStd);
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = Tensor::full({1, d}, 1.0);
    L.ln1_b = Tensor::zeros({1, d});
    L.wq = rng.gaussian_tensor({d, d}, kStd);
    L.wk = rng.gaussian_tensor({d, d}, kStd);
    L.wv = rng.gaussian_tensor({d, d}, kStd);
    L.wo = rng.gaussian_tensor({d, d}, kStd);
    L.ln2_g = Tensor::full({1, d}, 1.0);
    L.ln2_b = Tensor::zeros({1, d});
    L.mlp_w1 = rng.gaussian_tensor({d, 4 * d}, kStd);
    L.mlp_b1 = Tensor::zeros({1, 4 * d});
    L.mlp_w2 = rng.gaussian_tensor({4 * d, d}, kStd);
    L.mlp_b2 = Tensor::zeros({1, d});
  }
  p.lnf_g = Tensor::full({1, d}, 1.0);
  p.lnf_b = Tensor::zeros({1, d});
  p.head_w = rng.gaussian_tensor({d, cfg.vocab_size}, kStd);
  return p;
}

// --- graph binding -------------------------------------------------------------

/// Parameter blocks lifted into a graph, either as constants (inference and
/// steering, where the freeze contract forbids parameter gradients) or as
/// gradient leaves (toy training).
struct ParamVars {
  const ModelConfig* cfg = nullptr;
  Var tok_emb, patch_w, patch_b, pos_emb;
  struct Layer {
    Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };
  std::vector<Layer> layers;
  Var lnf_g, lnf_b, head_w;
};

inline ParamVars bind_params_const(Graph& g, const ModelParams& p) {
  ParamVars v;
  v.cfg = &p.cfg;
  v.tok_emb = g.constant(p.tok_emb);
  v.patch_w = g.constant(p.patch_w);
  v.patch_b = g.constant(p.patch_b);
  v.pos_emb = g.constant(p.pos_emb);
  v.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& V = v.layers[l];
    V.ln1_g = g.constant(L.ln1_g);
    V.ln1_b = g.constant(L.ln1_b);
    V.wq = g.constant(L.wq);
    V.wk = g.constant(L.wk);
    V.wv = g.constant(L.wv);
    V.wo = g.constant(L.wo);
    V.ln2_g = g.constant(L.ln2_g);
    V.ln2_b = g.constant(L.ln2_b);
    V.mlp_w1 = g.constant(L.mlp_w1);
    V.mlp_b1 = g.constant(L.mlp_b1);
    V.mlp_w2 = g.constant(L.mlp_w2);
    V.mlp_b2 = g.constant(L.mlp_b2);
  }
  v.lnf_g = g.constant(p.lnf_g);
  v.lnf_b = g.constant(p.lnf_b);
  v.head_w = g.constant(p.head_w);
  return v;
}

inline ParamVars bind_params_leaf(Graph& g, ModelParams& p) {
  ParamVars v;
  v.cfg = &p.cfg;
  v.tok_emb = g.leaf(p.tok_emb);
  v.patch_w = g.leaf(p.patch_w);
  v.patch_b = g.leaf(p.patch_b);
  v.pos_emb = g.leaf(p.pos_emb);
  v.layers.resize(p.layers.size());
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    auto& V = v.layers[l];
    V.ln1_g = g.leaf(L.ln1_g);
    V.ln1_b = g.leaf(L.ln1_b);
    V.wq = g.leaf(L.wq);
    V.wk = g.leaf(L.wk);
    V.wv = g.leaf(L.wv);
    V.wo = g.leaf(L.wo);
    V.ln2_g = g.leaf(L.ln2_g);
    V.ln2_b = g.leaf(L.ln2_b);
    V.mlp_w1 = g.leaf(L.mlp_w1);
    V.mlp_b1 = g.leaf(L.mlp_b1);
    V.mlp_w2 = g.leaf(L.mlp_w2);
    V.mlp_b2 = g.leaf(L.mlp_b2);
  }
  v.lnf_g = g.leaf(p.lnf_g);
  v.lnf_b = g.leaf(p.lnf_b);
  v.head_w = g.leaf(p.head_w);
  return v;
}

// --- sequence layout and forward ------------------------------------------------

/// Index ranges inside the flat decoder sequence. Visual tokens occupy
/// [0, n_v), the text prompt [n_v, n_v+n_t), and the answer-start query row is
/// the last text-prompt position.
struct SeqLayout {
  int n_v = 0;
  int n_t = 0;
  int total = 0;

  int answer_start() const { return n_v + n_t - 1; }
};

struct ForwardResult {
  Var logits;                          // [total x vocab]
  std::vector<std::vector<Var>> attn;  // [layer][head], each [total x total]
  SeqLayout layout;
};

/// Plain-tensor copy of the recorded maps, for use after the graph is gone.
struct AttentionStack {
  std::vector<std::vector<Tensor>> maps;  // [layer][head]
  SeqLayout layout;
};

inline AttentionStack snapshot_attn(const ForwardResult& r) {
  AttentionStack s;
  s.layout = r.layout;
  s.maps.resize(r.attn.size());
  for (size_t l = 0; l < r.attn.size(); ++l)
    for (const Var& v : r.attn[l]) s.maps[l].push_back(v.value());
  return s;
}

/// Visual-token embeddings: per-cell feature projection plus positional rows,
/// plus the optional additive latent p_v. Output rows align with grid cells in
/// row-major order.
inline Var embed_image(Graph& g, const ParamVars& pv, const Tensor& feats,
                       std::optional<Var> p_v = std::nullopt) {
  const ModelConfig& cfg = *pv.cfg;
  require(feats.shape.size() == 2 && feats.shape[0] == cfg.n_vis() &&
              feats.shape[1] == cfg.feat_dim,
          "embed_image: features must be [" + std::to_string(cfg.n_vis()) + " x " +
              std::to_string(cfg.feat_dim) + "], got " + feats.shape_str());
  Var x = add_rowvec(matmul(g.constant(feats), pv.patch_w), pv.patch_b);
  Var pos = slice(pv.pos_emb, 0, cfg.n_vis(), 0, cfg.d_model);
  x = add(x, pos);
  if (p_v.has_value()) {
    require(p_v->value().shape == std::vector<int>({cfg.n_vis(), cfg.d_model}),
            "embed_image: p_v must be [" + std::to_string(cfg.n_vis()) + " x " +
                std::to_string(cfg.d_model) + "], got " + p_v->value().shape_str());
    x = add(x, *p_v);
  }
  return x;
}

/// Pre-norm transformer forward over [e_v, text]. Records every post-softmax
/// attention map. `key_bias`, when given, is added to the pre-softmax scores
/// of the first n_v key columns in every layer, head, and query row; this is
/// the hook the edit-attention baseline uses.
inline ForwardResult forward(Graph& g, const ParamVars& pv, Var e_v,
                             const std::vector<int>& text,
                             const std::vector<double>* key_bias = nullptr) {
  const ModelConfig& cfg = *pv.cfg;
  const int n_v = cfg.n_vis();
  const int d = cfg.d_model;
  const int dk = cfg.d_k();
  require(e_v.value().shape == std::vector<int>({n_v, d}),
          "forward: e_v must be [" + std::to_string(n_v) + " x " + std::to_string(d) +
              "], got " + e_v.value().shape_str());
  require(!text.empty(), "forward: empty text sequence");
  for (int t : text)
    require(0 <= t && t < cfg.vocab_size,
            "forward: token id " + std::to_string(t) + " outside vocab of " +
                std::to_string(cfg.vocab_size));
  const int n_t = static_cast<int>(text.size());
  const int S = n_v + n_t;
  require(S <= cfg.max_seq, "forward: sequence length " + std::to_string(S) +
                                " overflows max_seq " + std::to_string(cfg.max_seq));
  if (key_bias != nullptr)
    require(static_cast<int>(key_bias->size()) == n_v,
            "forward: key_bias must have one entry per visual token");

  Var txt = add(lookup_rows(pv.tok_emb, text), slice(pv.pos_emb, n_v, S, 0, d));
  Var x = concat_rows({e_v, txt});

  // Causal mask plus the optional key-column bias, baked into one additive
  // constant. exp(-1e9) underflows to zero, so masked cells are exactly 0
  // after softmax.
  Tensor maskbias = Tensor::zeros({S, S});
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      double v = j > i ? -1e9 : 0.0;
      if (key_bias != nullptr && j < n_v) v += (*key_bias)[static_cast<size_t>(j)];
      maskbias.at(i, j) = v;
    }
  Var mask = g.constant(std::move(maskbias));

  ForwardResult out;
  out.layout = SeqLayout{n_v, n_t, S};
  out.attn.resize(static_cast<size_t>(cfg.n_layers));

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = pv.layers[static_cast<size_t>(l)];
    Var h = layernorm(x, L.ln1_g, L.ln1_b);
    Var q = matmul(h, L.wq);
    Var k = matmul(h, L.wk);
    Var v = matmul(h, L.wv);
    std::vector<Var> head_ctx;
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      Var qh = slice(q, 0, S, hh * dk, (hh + 1) * dk);
      Var kh = slice(k, 0, S, hh * dk, (hh + 1) * dk);
      Var vh = slice(v, 0, S, hh * dk, (hh + 1) * dk);
      Var scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), mask);
      Var attn = softmax_rows(scores);
      out.attn[static_cast<size_t>(l)].push_back(attn);
      head_ctx.push_back(matmul(attn, vh));
    }
    Var ctx = cfg.n_heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
    x = add(x, matmul(ctx, L.wo));
    Var h2 = layernorm(x, L.ln2_g, L.ln2_b);
    Var m = gelu(add_rowvec(matmul(h2, L.mlp_w1), L.mlp_b1));
    x = add(x, add_rowvec(matmul(m, L.mlp_w2), L.mlp_b2));
  }
  Var xf = layernorm(x, pv.lnf_g, pv.lnf_b);
  out.logits = matmul(xf, pv.head_w);
  return out;
}

/// Logits at the final position, as a plain vocab-length tensor.
inline Tensor next_token_logits(const ForwardResult& r) {
  const Tensor& lv = r.logits.value();
  const int vocab = lv.shape[1];
  Tensor out = Tensor::zeros({vocab});
  for (int j = 0; j < vocab; ++j) out.data[static_cast<size_t>(j)] = lv.at(r.layout.total - 1, j);
  return out;
}

/// One frozen-model forward from raw inputs. Convenience wrapper used all over
/// steering, decoding, and the harness.
inline ForwardResult run_frozen(Graph& g, const ModelParams& params, const Tensor& feats,
                                const std::vector<int>& text,
                                std::optional<Var> p_v = std::nullopt,
                                const std::vector<double>* key_bias = nullptr) {
  ParamVars pv = bind_params_const(g, params);
  Var e_v = embed_image(g, pv, feats, p_v);
  return forward(g, pv, e_v, text, key_bias);
}

}  // namespace attnsteer
