// Toy decoder tests: init determinism, embedding additivity, attention stack
// contracts (row normalization, causality), the latent and bias hooks, and the
// checkpoint round trip.

#include <gtest/gtest.h>

#include <cstdio>

#include <attnsteer/checkpoint.hpp>
#include <attnsteer/model.hpp>

using namespace attnsteer;

namespace {

ModelConfig tiny_config(int layers = 2, int heads = 2) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.grid = 4;
  cfg.feat_dim = 9;
  cfg.vocab_size = 40;
  cfg.max_seq = 32;
  cfg.seed = 11;
  return cfg;
}

Tensor random_feats(const ModelConfig& cfg, uint64_t seed) {
  return Rng(seed).gaussian_tensor({cfg.n_vis(), cfg.feat_dim}, 1.0);
}

}  // namespace

TEST(InitModel, SameSeedSameChecksum) {
  ModelConfig cfg = tiny_config();
  EXPECT_EQ(params_checksum(init_model(cfg)), params_checksum(init_model(cfg)));
  ModelConfig other = cfg;
  other.seed = 12;
  EXPECT_NE(params_checksum(init_model(cfg)), params_checksum(init_model(other)));
}

TEST(InitModel, WeightStdNearConfigured) {
  ModelParams p = init_model(ModelConfig{});  // default 4x4x48 model
  std::vector<double> samples;
  p.for_each_block([&](const std::string& name, const Tensor& t) {
    // Gaussian-drawn blocks only; norm gains and biases start at 1 and 0.
    bool gaussian = name.find("ln") == std::string::npos &&
                    name.find("_b") == std::string::npos;
    if (!gaussian) return;
    samples.insert(samples.end(), t.data.begin(), t.data.end());
  });
  ASSERT_GE(samples.size(), 10000u);
  double mean = 0.0;
  for (double v : samples) mean += v;
  mean /= static_cast<double>(samples.size());
  double var = 0.0;
  for (double v : samples) var += (v - mean) * (v - mean);
  double std = std::sqrt(var / static_cast<double>(samples.size()));
  EXPECT_GE(std, 0.015);
  EXPECT_LE(std, 0.025);
}

TEST(InitModel, RejectsIndivisibleHeads) {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;
  EXPECT_THROW(init_model(cfg), std::invalid_argument);
}

TEST(EmbedImage, ZeroLatentIsIdentity) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 1);
  Tensor zero = Tensor::zeros({cfg.n_vis(), cfg.d_model});

  Graph g;
  ParamVars pv = bind_params_const(g, params);
  Tensor without = embed_image(g, pv, feats).value();
  Tensor with = embed_image(g, pv, feats, g.constant(zero)).value();
  EXPECT_EQ(without.data, with.data);
}

TEST(EmbedImage, DeltaLatentIsLocal) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 2);
  Tensor delta = Tensor::zeros({cfg.n_vis(), cfg.d_model});
  const int hot_row = 5;
  for (int j = 0; j < cfg.d_model; ++j) delta.at(hot_row, j) = 0.75;

  Graph g;
  ParamVars pv = bind_params_const(g, params);
  Tensor base = embed_image(g, pv, feats).value();
  Tensor bumped = embed_image(g, pv, feats, g.constant(delta)).value();
  for (int r = 0; r < cfg.n_vis(); ++r)
    for (int j = 0; j < cfg.d_model; ++j) {
      if (r == hot_row)
        EXPECT_NE(base.at(r, j), bumped.at(r, j));
      else
        EXPECT_EQ(base.at(r, j), bumped.at(r, j));
    }
}

TEST(EmbedImage, AdditiveInLatent) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 3);
  Rng rng(4);

  // Disjoint-support latents: adding p2 where p1 contributed exact zeros is
  // bitwise exact.
  Tensor p1 = Tensor::zeros({cfg.n_vis(), cfg.d_model});
  Tensor p2 = Tensor::zeros({cfg.n_vis(), cfg.d_model});
  for (int r = 0; r < cfg.n_vis(); ++r)
    for (int j = 0; j < cfg.d_model; ++j) {
      double v = rng.gaussian();
      if (r % 2 == 0)
        p1.at(r, j) = v;
      else
        p2.at(r, j) = v;
    }
  Tensor sum = Tensor::zeros({cfg.n_vis(), cfg.d_model});
  for (size_t i = 0; i < sum.data.size(); ++i) sum.data[i] = p1.data[i] + p2.data[i];

  Graph g;
  ParamVars pv = bind_params_const(g, params);
  Tensor via_sum = embed_image(g, pv, feats, g.constant(sum)).value();
  Tensor via_p1 = embed_image(g, pv, feats, g.constant(p1)).value();
  for (size_t i = 0; i < via_sum.data.size(); ++i)
    EXPECT_EQ(via_sum.data[i], via_p1.data[i] + p2.data[i]);

  // Dense latents: float reassociation allows ulp-level drift, nothing more.
  Tensor d1 = Rng(5).gaussian_tensor({cfg.n_vis(), cfg.d_model}, 0.5);
  Tensor d2 = Rng(6).gaussian_tensor({cfg.n_vis(), cfg.d_model}, 0.5);
  Tensor dsum = Tensor::zeros(d1.shape);
  for (size_t i = 0; i < dsum.data.size(); ++i) dsum.data[i] = d1.data[i] + d2.data[i];
  Tensor via_dsum = embed_image(g, pv, feats, g.constant(dsum)).value();
  Tensor via_d1 = embed_image(g, pv, feats, g.constant(d1)).value();
  for (size_t i = 0; i < via_dsum.data.size(); ++i)
    EXPECT_NEAR(via_dsum.data[i], via_d1.data[i] + d2.data[i], 1e-12);
}

TEST(EmbedImage, DistinctFeaturesGiveDistinctEmbeddings) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats_a = Tensor::zeros({cfg.n_vis(), cfg.feat_dim});
  Tensor feats_b = Tensor::zeros({cfg.n_vis(), cfg.feat_dim});
  feats_a.at(0, 1) = 1.0;  // color slot 0
  feats_b.at(0, 2) = 1.0;  // color slot 1
  Graph g;
  ParamVars pv = bind_params_const(g, params);
  Tensor ea = embed_image(g, pv, feats_a).value();
  Tensor eb = embed_image(g, pv, feats_b).value();
  bool differs = false;
  for (int j = 0; j < cfg.d_model; ++j) differs = differs || ea.at(0, j) != eb.at(0, j);
  EXPECT_TRUE(differs);
}

TEST(Forward, AttentionRowsAreStochasticAndCausal) {
  for (int layers : {2, 4}) {
    for (int heads : {1, 2, 4}) {
      ModelConfig cfg = tiny_config(layers, heads);
      ModelParams params = init_model(cfg);
      Tensor feats = random_feats(cfg, 7);
      std::vector<int> text = {1, 2, 4, 3};
      Graph g;
      ForwardResult fr = run_frozen(g, params, feats, text);
      const int S = fr.layout.total;
      ASSERT_EQ(S, cfg.n_vis() + 4);
      for (const auto& layer : fr.attn) {
        ASSERT_EQ(static_cast<int>(layer.size()), heads);
        for (const Var& head : layer) {
          const Tensor& a = head.value();
          for (int i = 0; i < S; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < S; ++j) {
              if (j > i) EXPECT_EQ(a.at(i, j), 0.0);
              row_sum += a.at(i, j);
            }
            EXPECT_NEAR(row_sum, 1.0, 1e-9);
          }
        }
      }
    }
  }
}

TEST(Forward, LatentPerturbationMovesAttention) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 8);
  std::vector<int> text = {1, 2, 4, 3};

  Graph g1;
  ForwardResult base = run_frozen(g1, params, feats, text);
  Graph g2;
  Tensor p_v = Rng(9).gaussian_tensor({cfg.n_vis(), cfg.d_model}, 0.5);
  ForwardResult steered = run_frozen(g2, params, feats, text, g2.constant(p_v));

  bool any_diff = false;
  for (size_t l = 0; l < base.attn.size(); ++l)
    for (size_t h = 0; h < base.attn[l].size(); ++h)
      any_diff = any_diff ||
                 base.attn[l][h].value().data != steered.attn[l][h].value().data;
  EXPECT_TRUE(any_diff);
}

TEST(Forward, KeyBiasShiftsMassOntoBiasedColumns) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 10);
  std::vector<int> text = {1, 2, 4, 3};
  std::vector<double> bias(static_cast<size_t>(cfg.n_vis()), 0.0);
  bias[0] = 25.0;

  Graph g1, g2;
  ForwardResult plain = run_frozen(g1, params, feats, text);
  ForwardResult biased = run_frozen(g2, params, feats, text, std::nullopt, &bias);
  int last = plain.layout.total - 1;
  for (size_t l = 0; l < plain.attn.size(); ++l)
    for (size_t h = 0; h < plain.attn[l].size(); ++h)
      EXPECT_GT(biased.attn[l][h].value().at(last, 0), plain.attn[l][h].value().at(last, 0));
}

TEST(Forward, RejectsOverflowAndBadTokens) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 11);
  Graph g;
  std::vector<int> too_long(static_cast<size_t>(cfg.max_seq - cfg.n_vis() + 1), 1);
  EXPECT_THROW(run_frozen(g, params, feats, too_long), std::invalid_argument);
  Graph g2;
  EXPECT_THROW(run_frozen(g2, params, feats, {1, 99}), std::invalid_argument);
}

TEST(Forward, FrozenForwardLeavesChecksumAndHasNoGradPath) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  uint64_t before = params_checksum(params);
  Tensor feats = random_feats(cfg, 12);
  Graph g;
  ForwardResult fr = run_frozen(g, params, feats, {1, 2, 4, 3});
  EXPECT_EQ(params_checksum(params), before);
  // Nothing in a frozen forward requires gradients, so backward refuses.
  EXPECT_THROW(g.backward(sum_all(fr.logits)), std::logic_error);
}

TEST(NextTokenLogits, DeterministicAndWellFormed) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  Tensor feats = random_feats(cfg, 13);
  std::vector<int> text = {1, 2, 4, 3};

  Graph g1, g2;
  Tensor a = next_token_logits(run_frozen(g1, params, feats, text));
  Tensor b = next_token_logits(run_frozen(g2, params, feats, text));
  EXPECT_EQ(a.data, b.data);
  ASSERT_EQ(a.numel(), cfg.vocab_size);
  int best = 0;
  for (int j = 1; j < cfg.vocab_size; ++j)
    if (a.data[static_cast<size_t>(j)] > a.data[static_cast<size_t>(best)]) best = j;
  EXPECT_GE(best, 0);
  EXPECT_LT(best, cfg.vocab_size);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_model(cfg);
  std::string path = "test_model_ckpt.bin";
  save_checkpoint(params, path);
  ModelParams back = load_checkpoint(path);
  EXPECT_EQ(params_checksum(back), params_checksum(params));
  bool identical = true;
  params.for_each_block([&](const std::string& name, const Tensor& t) {
    back.for_each_block([&](const std::string& name2, const Tensor& t2) {
      if (name == name2) identical = identical && t.data == t2.data;
    });
  });
  EXPECT_TRUE(identical);
  std::remove(path.c_str());
}

TEST(Checkpoint, SaveIsByteDeterministic) {
  ModelParams params = init_model(tiny_config());
  save_checkpoint(params, "ckpt_a.bin");
  save_checkpoint(params, "ckpt_b.bin");
  std::ifstream fa("ckpt_a.bin", std::ios::binary), fb("ckpt_b.bin", std::ios::binary);
  std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  EXPECT_EQ(a, b);
  std::remove("ckpt_a.bin");
  std::remove("ckpt_b.bin");
}

TEST(Checkpoint, RejectsGarbageAndMissingFiles) {
  EXPECT_THROW(load_checkpoint("does_not_exist.bin"), io_error);
  {
    std::ofstream f("garbage.bin", std::ios::binary);
    f << "definitely not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint("garbage.bin"), io_error);
  std::remove("garbage.bin");
}
