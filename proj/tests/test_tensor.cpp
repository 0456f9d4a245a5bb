// Core tensor and autodiff tests. Every op's backward is checked against the
// central finite-difference oracle, which itself is validated on closed-form
// cases first.

#include <gtest/gtest.h>

#include <attnsteer/gradcheck.hpp>
#include <attnsteer/graph.hpp>

using namespace attnsteer;

namespace {

// Scalarize an op output so one backward checks every output coordinate:
// loss = sum(out * fixed_weights).
Var weighted_sum(Graph& g, Var v, const Tensor& w) {
  return sum_all(mul(v, g.constant(w)));
}

// Autodiff-vs-finite-difference on a scalar loss built from one input leaf.
template <class MakeLoss>
double grad_gap(const MakeLoss& make_loss, const Tensor& x0, double h = 1e-5) {
  Tensor x = x0;
  x.requires_grad = true;
  x.zero_grad();
  Graph g;
  Var xv = g.leaf(x);
  g.backward(make_loss(g, xv));
  Tensor ad = Tensor::zeros(x0.shape);
  ad.data = x.grad;

  Tensor fd = finite_difference_grad(
      [&](const Tensor& t) {
        Tensor probe = t;
        Graph g2;
        Var v = g2.leaf(probe);
        return make_loss(g2, v).value().data[0];
      },
      x0, h);
  return max_rel_err(ad, fd);
}

}  // namespace

// --- finite-difference oracle sanity ---------------------------------------------

TEST(FiniteDifference, SumHasUnitGradient) {
  Rng rng(1);
  Tensor x = rng.gaussian_tensor({3, 4}, 1.0);
  Tensor fd = finite_difference_grad(
      [](const Tensor& t) {
        double s = 0.0;
        for (double v : t.data) s += v;
        return s;
      },
      x);
  for (double v : fd.data) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, SquareAtThree) {
  Tensor x = Tensor::scalar(3.0);
  Tensor fd = finite_difference_grad(
      [](const Tensor& t) { return t.data[0] * t.data[0]; }, x, 1e-5);
  EXPECT_NEAR(fd.data[0], 6.0, 1e-7);
}

// --- tensor basics ----------------------------------------------------------------

TEST(Tensor, FactoriesAndShape) {
  Tensor z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.numel(), 6);
  EXPECT_EQ(z.shape_str(), "[2,3]");
  Tensor f = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(f.at(1, 0), 3.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, FiniteCheck) {
  Tensor t = Tensor::from({2}, {1.0, std::nan("")});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(check_finite(t, "probe"), numeric_error);
}

TEST(Tensor, ChecksumDistinguishesData) {
  Tensor a = Tensor::from({2}, {1.0, 2.0});
  Tensor b = Tensor::from({2}, {1.0, 2.0000001});
  EXPECT_EQ(tensor_checksum(a), tensor_checksum(a));
  EXPECT_NE(tensor_checksum(a), tensor_checksum(b));
}

TEST(Rng, SeededStreamsAreIdentical) {
  Rng a(42), b(42), c(43);
  bool any_diff = false;
  for (int i = 0; i < 100; ++i) {
    double va = a.gaussian(), vb = b.gaussian(), vc = c.gaussian();
    EXPECT_EQ(va, vb);
    any_diff = any_diff || va != vc;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Rng, GaussianTensorBitIdentical) {
  Tensor a = Rng(7).gaussian_tensor({4, 5}, 0.02);
  Tensor b = Rng(7).gaussian_tensor({4, 5}, 0.02);
  EXPECT_EQ(tensor_checksum(a), tensor_checksum(b));
}

// --- graph mechanics --------------------------------------------------------------

TEST(Graph, SumBackwardIsOnes) {
  Tensor x = Rng(3).gaussian_tensor({2, 3}, 1.0);
  x.requires_grad = true;
  x.zero_grad();
  Graph g;
  g.backward(sum_all(g.leaf(x)));
  for (double v : x.grad) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Graph, HalfSquareBackwardIsX) {
  Tensor x = Rng(4).gaussian_tensor({5}, 1.0);
  x.requires_grad = true;
  x.zero_grad();
  Graph g;
  Var xv = g.leaf(x);
  g.backward(scale(sum_all(mul(xv, xv)), 0.5));
  for (size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(x.grad[i], x.data[i], 1e-12);
}

TEST(Graph, RejectsNonScalarLoss) {
  Tensor x = Tensor::zeros({2, 2}, true);
  Graph g;
  Var xv = g.leaf(x);
  EXPECT_THROW(g.backward(xv), std::logic_error);
}

TEST(Graph, RejectsDoubleBackward) {
  Tensor x = Tensor::zeros({2}, true);
  Graph g;
  Var loss = sum_all(g.leaf(x));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), std::logic_error);
}

TEST(Graph, BackwardIsLinear) {
  Rng rng(11);
  Tensor x0 = rng.gaussian_tensor({3, 3}, 1.0);
  const double a = 1.7, b = -0.4;

  auto f_loss = [](Graph& g, Var v) { return sum_all(mul(v, v)); };
  auto g_loss = [](Graph& g, Var v) { return sum_all(gelu(v)); };

  auto grad_of = [&](auto make) {
    Tensor x = x0;
    x.requires_grad = true;
    x.zero_grad();
    Graph g;
    g.backward(make(g, g.leaf(x)));
    return x.grad;
  };
  std::vector<double> gf = grad_of(f_loss);
  std::vector<double> gg = grad_of(g_loss);
  std::vector<double> gc = grad_of([&](Graph& g, Var v) {
    return add(scale(f_loss(g, v), a), scale(g_loss(g, v), b));
  });
  for (size_t i = 0; i < gc.size(); ++i)
    EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-10);
}

TEST(Graph, LeafSnapshotIgnoresLaterMutation) {
  Tensor x = Tensor::from({2}, {1.0, 2.0});
  Graph g;
  Var xv = g.leaf(x);
  x.data[0] = 99.0;
  EXPECT_DOUBLE_EQ(xv.value().data[0], 1.0);
}

// --- op forward examples ----------------------------------------------------------

TEST(Matmul, IdentityTimesIdentity) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Graph g;
  Tensor out = matmul(g.constant(eye), g.constant(eye)).value();
  EXPECT_EQ(out.data, eye.data);
}

TEST(Matmul, HandArithmetic) {
  Graph g;
  Var a = g.constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
  Var b = g.constant(Tensor::from({2, 1}, {0, 1}));
  Tensor out = matmul(a, b).value();
  EXPECT_DOUBLE_EQ(out.data[0], 2.0);
  EXPECT_DOUBLE_EQ(out.data[1], 4.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(Tensor::zeros({2, 3}));
  Var b = g.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradOfSumWithOnes) {
  // d/dA sum(A*B) with B = ones is a matrix whose every entry is B's row count
  // worth of ones summed over columns, i.e. all entries equal to n.
  Rng rng(5);
  Tensor a0 = rng.gaussian_tensor({3, 4}, 1.0);
  Tensor b = Tensor::full({4, 2}, 1.0);
  double gap = grad_gap(
      [&](Graph& g, Var v) { return sum_all(matmul(v, g.constant(b))); }, a0);
  EXPECT_LT(gap, 1e-6);

  Tensor x = a0;
  x.requires_grad = true;
  x.zero_grad();
  Graph g;
  g.backward(sum_all(matmul(g.leaf(x), g.constant(b))));
  for (double v : x.grad) EXPECT_NEAR(v, 2.0, 1e-12);
}

TEST(SoftmaxRows, UniformLogits) {
  Graph g;
  Tensor out = softmax_rows(g.constant(Tensor::zeros({1, 4}))).value();
  for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(SoftmaxRows, StabilizedAgainstLargeLogits) {
  Graph g;
  Tensor out = softmax_rows(g.constant(Tensor::from({1, 2}, {1000.0, 0.0}))).value();
  EXPECT_TRUE(out.all_finite());
  EXPECT_NEAR(out.data[0], 1.0, 1e-12);
  EXPECT_NEAR(out.data[1], 0.0, 1e-12);
}

TEST(SoftmaxRows, RowsSumToOne) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = Rng(seed).gaussian_tensor({5, 7}, 3.0);
    Graph g;
    Tensor out = softmax_rows(g.constant(x)).value();
    for (int i = 0; i < 5; ++i) {
      double s = 0.0;
      for (int j = 0; j < 7; ++j) {
        EXPECT_GE(out.at(i, j), 0.0);
        EXPECT_LE(out.at(i, j), 1.0);
        s += out.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ConstantRowBecomesBias) {
  Graph g;
  Var x = g.constant(Tensor::full({1, 4}, 3.25));
  Var gain = g.constant(Tensor::full({1, 4}, 2.0));
  Var bias = g.constant(Tensor::from({1, 4}, {1, 2, 3, 4}));
  Tensor out = layernorm(x, gain, bias).value();
  // Zero variance: the normalized value is 0 and the affine result is bias.
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(out.at(0, j), j + 1.0, 1e-6);
}

TEST(LayerNorm, NormalizedRowUnchanged) {
  // Mean 0, variance 1 row with identity affine.
  Tensor x = Tensor::from({1, 2}, {-1.0, 1.0});
  Graph g;
  Tensor out = layernorm(g.constant(x), g.constant(Tensor::full({1, 2}, 1.0)),
                         g.constant(Tensor::zeros({1, 2})))
                   .value();
  EXPECT_NEAR(out.at(0, 0), -1.0, 1e-5);
  EXPECT_NEAR(out.at(0, 1), 1.0, 1e-5);
}

TEST(CrossEntropy, MatchesClosedForm) {
  // Uniform logits over v classes: loss = log(v).
  Graph g;
  Var logits = g.constant(Tensor::zeros({2, 5}));
  Tensor out = cross_entropy_rows(logits, {{0, 1}, {1, 3}}).value();
  EXPECT_NEAR(out.data[0], std::log(5.0), 1e-12);
}

TEST(Clamp01, ForwardAndFlatRegions) {
  Graph g;
  Tensor out = clamp01(g.constant(Tensor::from({4}, {-0.5, 0.25, 0.75, 1.5}))).value();
  EXPECT_DOUBLE_EQ(out.data[0], 0.0);
  EXPECT_DOUBLE_EQ(out.data[1], 0.25);
  EXPECT_DOUBLE_EQ(out.data[2], 0.75);
  EXPECT_DOUBLE_EQ(out.data[3], 1.0);
}

// --- per-op gradient property suite ------------------------------------------------
//
// 100+ seeded trials across the op set, each comparing the backward pass to
// central finite differences at h = 1e-5 with relative tolerance 1e-5.

TEST(GradCheck, ElementwiseOps) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor x = rng.gaussian_tensor({3, 4}, 1.0);
    Tensor w = rng.gaussian_tensor({3, 4}, 1.0);
    Tensor y = rng.gaussian_tensor({3, 4}, 1.0);

    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, add(v, g.constant(y)), w); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, sub(g.constant(y), v), w); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, mul(v, g.constant(y)), w); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, scale(v, -2.5), w); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, gelu(v), w); }, x), 1e-5);
  }
}

TEST(GradCheck, DivideBothSides) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Tensor num = rng.gaussian_tensor({2, 5}, 1.0);
    // Keep denominators away from zero so the finite differences stay sane.
    Tensor den = Tensor::zeros({2, 5});
    for (double& v : den.data) v = 1.0 + rng.uniform();
    Tensor w = rng.gaussian_tensor({2, 5}, 1.0);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, divide(v, g.constant(den)), w); }, num), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, divide(g.constant(num), v), w); }, den), 1e-5);
  }
}

TEST(GradCheck, Clamp01AwayFromKinks) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(200 + seed);
    Tensor x = Tensor::zeros({3, 3});
    for (double& v : x.data) {
      // Sample in [-1, 2] but stay 1e-3 clear of the kinks at 0 and 1.
      do {
        v = rng.uniform() * 3.0 - 1.0;
      } while (std::fabs(v) < 1e-3 || std::fabs(v - 1.0) < 1e-3);
    }
    Tensor w = rng.gaussian_tensor({3, 3}, 1.0);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, clamp01(v), w); }, x), 1e-5);
  }
}

TEST(GradCheck, MatrixOps) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(300 + seed);
    Tensor a = rng.gaussian_tensor({3, 4}, 1.0);
    Tensor b = rng.gaussian_tensor({4, 2}, 1.0);
    Tensor wab = rng.gaussian_tensor({3, 2}, 1.0);
    Tensor wt = rng.gaussian_tensor({4, 3}, 1.0);

    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, matmul(v, g.constant(b)), wab); }, a), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, matmul(g.constant(a), v), wab); }, b), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, transpose(v), wt); }, a), 1e-5);
  }
}

TEST(GradCheck, SoftmaxAndLayerNorm) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(400 + seed);
    Tensor x = rng.gaussian_tensor({3, 4}, 2.0);
    Tensor w = rng.gaussian_tensor({3, 4}, 1.0);
    Tensor gain = rng.gaussian_tensor({1, 4}, 1.0);
    Tensor bias = rng.gaussian_tensor({1, 4}, 1.0);

    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, softmax_rows(v), w); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      return weighted_sum(g, layernorm(v, g.constant(gain), g.constant(bias)), w);
    }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      return weighted_sum(g, layernorm(g.constant(x), v, g.constant(bias)), w);
    }, gain), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      return weighted_sum(g, layernorm(g.constant(x), g.constant(gain), v), w);
    }, bias), 1e-5);
  }
}

TEST(GradCheck, ReductionsAndAssembly) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    Tensor x = rng.gaussian_tensor({4, 6}, 1.0);
    Tensor other = rng.gaussian_tensor({2, 6}, 1.0);
    Tensor wsr = rng.gaussian_tensor({1, 6}, 1.0);
    Tensor wsl = rng.gaussian_tensor({2, 3}, 1.0);
    Tensor wcr = rng.gaussian_tensor({6, 6}, 1.0);
    Tensor wcc = rng.gaussian_tensor({4, 12}, 1.0);
    Tensor bias = rng.gaussian_tensor({1, 6}, 1.0);
    Tensor wre = rng.gaussian_tensor({6, 4}, 1.0);

    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return sum_all(v); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, sum_rows(v), wsr); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, slice(v, 1, 3, 2, 5), wsl); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      return weighted_sum(g, concat_rows({v, g.constant(other)}), wcr);
    }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      return weighted_sum(g, concat_cols({v, v}), wcc);
    }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, add_rowvec(v, g.constant(bias)), x); }, x), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, add_rowvec(g.constant(x), v), x); }, bias), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, reshape(v, {6, 4}), wre); }, x), 1e-5);
  }
}

TEST(GradCheck, LookupAndCrossEntropy) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(600 + seed);
    Tensor table = rng.gaussian_tensor({7, 3}, 1.0);
    std::vector<int> ids = {2, 5, 2, 0};
    Tensor wl = rng.gaussian_tensor({4, 3}, 1.0);
    Tensor logits = rng.gaussian_tensor({4, 6}, 2.0);
    std::vector<std::pair<int, int>> targets = {{0, 2}, {2, 5}, {3, 0}};

    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return weighted_sum(g, lookup_rows(v, ids), wl); }, table), 1e-5);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) { return cross_entropy_rows(v, targets); }, logits), 1e-5);
  }
}

TEST(GradCheck, CompositeChain) {
  // A little pre-norm block stand-in: mixes most ops in one graph.
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(700 + seed);
    Tensor x = rng.gaussian_tensor({4, 4}, 1.0);
    Tensor wq = rng.gaussian_tensor({4, 4}, 0.5);
    Tensor wk = rng.gaussian_tensor({4, 4}, 0.5);
    Tensor gain = Tensor::full({1, 4}, 1.0);
    Tensor bias = Tensor::zeros({1, 4});
    Tensor w = rng.gaussian_tensor({4, 4}, 1.0);
    EXPECT_LT(grad_gap([&](Graph& g, Var v) {
      Var h = layernorm(v, g.constant(gain), g.constant(bias));
      Var q = matmul(h, g.constant(wq));
      Var k = matmul(h, g.constant(wk));
      Var attn = softmax_rows(scale(matmul(q, transpose(k)), 0.5));
      return weighted_sum(g, matmul(attn, v), w);
    }, x), 1e-5);
  }
}
