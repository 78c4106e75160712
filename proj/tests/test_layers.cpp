/* Copyright 2026 The L4Q Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <memory>
#include <vector>

#include "l4q/layers.hpp"
#include "l4q/optim.hpp"
#include "l4q/qinit.hpp"
#include "support/gradient_oracle.hpp"

namespace l4q {
namespace {

using testing::finite_difference;
using testing::Instance;
using testing::Kind;
using testing::relative_error;
using testing::mat;
using testing::vec;
using testing::params_of;
using testing::build;
using testing::check_against_oracle;

// ---------------------------------------------------------------------------
// LoRA

TEST(LoraForward, ZeroBIsBaseOnly) {
  Rng rng(1);
  const auto w0 = randn<double>(rng, 4, 6, 1.0);
  const auto x = randn<double>(rng, 6, 3, 1.0);
  auto ad = make_lora<double>(rng, 2, 6, 4, 1.0);
  EXPECT_EQ(lora_forward(w0, ad, x), matmul(w0, x));
}

TEST(LoraForward, ZeroAlphaIsBaseOnly) {
  Rng rng(2);
  const auto w0 = randn<double>(rng, 4, 6, 1.0);
  const auto x = randn<double>(rng, 6, 3, 1.0);
  LoraAdapter<double> ad{randn<double>(rng, 2, 6, 1.0), randn<double>(rng, 4, 2, 1.0), 0.0};
  EXPECT_EQ(lora_forward(w0, ad, x), matmul(w0, x));
}

TEST(LoraForward, MatchesMergedWeight) {
  Rng rng(3);
  const auto w0 = randn<double>(rng, 4, 6, 1.0);
  const auto x = randn<double>(rng, 6, 5, 1.0);
  LoraAdapter<double> ad{randn<double>(rng, 2, 6, 1.0), randn<double>(rng, 4, 2, 1.0), 0.7};
  EXPECT_LT(max_abs_diff(lora_forward(w0, ad, x), matmul(w0 + ad.delta(), x)), 1e-12);
}

TEST(LoraForward, ShapeMismatchThrows) {
  Rng rng(4);
  LoraAdapter<double> ad{randn<double>(rng, 2, 5, 1.0), randn<double>(rng, 4, 2, 1.0), 1.0};
  EXPECT_THROW(lora_forward(Matrix<double>(4, 6), ad, Matrix<double>(6, 1)), ShapeError);
}

TEST(LoraBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(5);
  LoraAdapter<double> ad{randn<double>(rng, 2, 6, 1.0), randn<double>(rng, 4, 2, 1.0), 1.0};
  const auto [da, db] = lora_backward(ad, randn<double>(rng, 6, 3, 1.0), Matrix<double>(4, 3));
  for (double v : da.values()) EXPECT_EQ(v, 0.0);
  for (double v : db.values()) EXPECT_EQ(v, 0.0);
}

TEST(LoraBackward, LinearInAlpha) {
  Rng rng(6);
  LoraAdapter<double> ad{randn<double>(rng, 2, 6, 1.0), randn<double>(rng, 4, 2, 1.0), 0.75};
  const auto x = randn<double>(rng, 6, 3, 1.0);
  const auto dy = randn<double>(rng, 4, 3, 1.0);
  const auto [da1, db1] = lora_backward(ad, x, dy);
  ad.alpha = 1.5;
  const auto [da2, db2] = lora_backward(ad, x, dy);
  EXPECT_EQ(da2, scaled(da1, 2.0));
  EXPECT_EQ(db2, scaled(db1, 2.0));
}

TEST(LoraLayer, BackwardWithoutForwardThrows) {
  Rng rng(7);
  LoraLayer<double> layer(randn<double>(rng, 4, 6, 1.0), make_lora<double>(rng, 2, 6, 4, 1.0));
  EXPECT_THROW(layer.backward(Matrix<double>(4, 1)), Error);
}

// ---------------------------------------------------------------------------
// STE derivatives

TEST(SteMask, ClosedInterval) {
  const QuantSpec spec(4, 1);
  const Matrix<double> w{{0.0, 7.0, 7.01, -8.0, -8.01}};
  const auto m = ste_mask(w, spec);
  EXPECT_EQ(m, (RangeMask(1, 5, {1, 1, 0, 1, 0})));
}

TEST(SteMask, AgreesWithDirectComparison) {
  Rng rng(8);
  const QuantSpec spec(3, 1);
  const auto w = randn<double>(rng, 10, 10, 5.0);
  const auto m = ste_mask(w, spec);
  for (std::size_t e = 0; e < w.size(); ++e)
    EXPECT_EQ(m.values()[e] == 1, w.values()[e] >= -4.0 && w.values()[e] <= 3.0);
}

TEST(DwqDs, CaseValues) {
  const QuantSpec spec(4, 1);
  const Matrix<double> w{{2.4, 9.0, -20.0, 3.0}};
  const QuantCodes codes{1, 4, {2, 7, -8, 3}};
  const auto d = dwq_ds(w, codes, spec);
  EXPECT_NEAR(d(0, 0), -0.4, 1e-15);
  EXPECT_EQ(d(0, 1), 7.0);
  EXPECT_EQ(d(0, 2), -8.0);
  EXPECT_EQ(d(0, 3), 0.0);
}

TEST(DwqDb, IsComplementOfMask) {
  const QuantSpec spec(4, 1);
  const Matrix<double> w{{0.0, -20.0}};
  const auto d = dwq_db(w, spec);
  EXPECT_EQ(d(0, 0), 0.0);
  EXPECT_EQ(d(0, 1), 1.0);

  Rng rng(9);
  const auto r = randn<double>(rng, 8, 8, 6.0);
  const auto db = dwq_db(r, spec);
  const auto m = ste_mask(r, spec);
  for (std::size_t e = 0; e < r.size(); ++e)
    EXPECT_EQ(db.values()[e], 1.0 - static_cast<double>(m.values()[e]));
}

// ---------------------------------------------------------------------------
// L4Q layer

TEST(L4qForward, OnGridWithZeroBIsExact) {
  Rng rng(10);
  const QuantSpec spec(4, 4);
  Matrix<double> w0(3, 8);
  for (auto& v : w0.values()) v = 0.25 * static_cast<double>(static_cast<int>(rng.below(16)) - 8);
  L4qLayer<double> layer(w0, make_lora<double>(rng, 2, 8, 3, 1.0),
                         {GroupParams<double>(3, 2, 0.25, 0.0), spec, false});
  const auto x = randn<double>(rng, 8, 4, 1.0);
  EXPECT_EQ(layer.forward(x), matmul(w0, x));
}

TEST(L4qForward, ZeroAlphaEqualsLsqForward) {
  Rng rng(11);
  const QuantSpec spec(4, 4);
  const auto w0 = randn<double>(rng, 4, 8, 1.0);
  const auto params = init_matrix(w0, InitScheme::kL4Q, spec).params;
  LoraAdapter<double> ad{randn<double>(rng, 2, 8, 1.0), randn<double>(rng, 4, 2, 1.0), 0.0};
  L4qLayer<double> l4q(w0, ad, {params, spec, false});
  LsqLayer<double> lsq(w0, {params, spec, false});
  const auto x = randn<double>(rng, 8, 3, 1.0);
  EXPECT_EQ(l4q.forward(x), lsq.forward(x));
}

TEST(L4qForward, MatchesQuantizerComposition) {
  Rng rng(12);
  const QuantSpec spec(4, 4);
  const auto w0 = randn<double>(rng, 4, 8, 1.0);
  LoraAdapter<double> ad{randn<double>(rng, 2, 8, 0.5), randn<double>(rng, 4, 2, 0.5), 1.0};
  const auto wcomb = w0 + ad.delta();
  const auto params = init_matrix(wcomb, InitScheme::kL4Q, spec).params;
  L4qLayer<double> layer(w0, ad, {params, spec, false});
  const auto x = randn<double>(rng, 8, 6, 1.0);
  const auto ref = matmul(dequantize(quantize(wcomb, params, spec), params, 4), x);
  EXPECT_LT(max_abs_diff(layer.forward(x), ref), 1e-12);
}

TEST(L4qForward, RejectsShapeMismatch) {
  Rng rng(13);
  const QuantSpec spec(4, 4);
  L4qLayer<double> layer(randn<double>(rng, 4, 8, 1.0), make_lora<double>(rng, 2, 8, 4, 1.0),
                         {GroupParams<double>(4, 2, 0.1, 0.0), spec, false});
  EXPECT_THROW(layer.forward(Matrix<double>(7, 2)), ShapeError);
  EXPECT_THROW(L4qLayer<double>(Matrix<double>(4, 8), make_lora<double>(rng, 2, 8, 4, 1.0),
                                {GroupParams<double>(4, 2, 0.0, 0.0), spec, false}),
               QuantError);
}

TEST(L4qBackward, ZeroUpstreamGivesZeroGrads) {
  auto p = testing::make_instance(Kind::kL4Q, 14);
  auto layer = build(p);
  layer->forward(mat(p.in, p.tokens, p.x));
  const auto& g = layer->backward(Matrix<double>(p.out, p.tokens));
  for (double v : g.dA.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.dB.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.ds) EXPECT_EQ(v, 0.0);
  for (double v : g.db) EXPECT_EQ(v, 0.0);
}

TEST(L4qBackward, AllClippedHandCase) {
  // Tiny scales push every element outside the range.
  const QuantSpec spec(4, 2);
  const Matrix<double> w0{{5.0, -5.0}, {-3.0, 4.0}};
  Rng rng(15);
  LoraAdapter<double> ad{randn<double>(rng, 1, 2, 0.1), randn<double>(rng, 2, 1, 0.1), 1.0};
  L4qLayer<double> layer(w0, ad, {GroupParams<double>(2, 1, 0.01, 0.0), spec, false});
  const Matrix<double> x{{1.0, 2.0}, {-1.0, 0.5}};
  const Matrix<double> dy{{0.3, -0.2}, {1.0, 0.7}};
  layer.forward(x);
  const auto g = layer.backward(dy);
  for (double v : g.dA.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.dB.values()) EXPECT_EQ(v, 0.0);
  // dWq = dy x^T computed by hand.
  const double d00 = 0.3 * 1.0 + -0.2 * 2.0, d01 = 0.3 * -1.0 + -0.2 * 0.5;
  const double d10 = 1.0 * 1.0 + 0.7 * 2.0, d11 = 1.0 * -1.0 + 0.7 * 0.5;
  const auto wc = layer.combined_weight();
  auto side = [&](double w) { return w > 0 ? 7.0 : -8.0; };
  EXPECT_NEAR(g.ds[0], d00 * side(wc(0, 0)) + d01 * side(wc(0, 1)), 1e-12);
  EXPECT_NEAR(g.ds[1], d10 * side(wc(1, 0)) + d11 * side(wc(1, 1)), 1e-12);
  EXPECT_NEAR(g.db[0], d00 + d01, 1e-12);
  EXPECT_NEAR(g.db[1], d10 + d11, 1e-12);
}

TEST(L4qBackward, BackwardWithoutForwardThrowsAndCacheClears) {
  auto p = testing::make_instance(Kind::kL4Q, 16);
  L4qLayer<double> layer(mat(p.out, p.in, p.w0),
                         {mat(p.rank, p.in, p.a), mat(p.out, p.rank, p.b), p.alpha},
                         {params_of(p), QuantSpec(p.bits, p.group), false});
  EXPECT_THROW(layer.backward(mat(p.out, p.tokens, p.g)), Error);
  layer.forward(mat(p.in, p.tokens, p.x));
  EXPECT_TRUE(layer.has_cache());
  layer.backward(mat(p.out, p.tokens, p.g));
  EXPECT_FALSE(layer.has_cache());
  EXPECT_THROW(layer.backward(mat(p.out, p.tokens, p.g)), Error);
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every layer kind.

class GradientFidelity : public ::testing::TestWithParam<Kind> {};

TEST_P(GradientFidelity, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = testing::make_instance(GetParam(), 100 + seed);
    const auto r = check_against_oracle(p);
    SCOPED_TRACE(testing::kind_name(GetParam()) + " seed " + std::to_string(seed));
    EXPECT_LT(r.forward, 1e-12);
    EXPECT_LT(r.dA, 1e-5);
    EXPECT_LT(r.dB, 1e-5);
    EXPECT_LT(r.ds, 1e-5);
    EXPECT_LT(r.db, 1e-5);
    EXPECT_LT(r.dW, 1e-5);
    EXPECT_LT(r.dX, 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, GradientFidelity,
                         ::testing::Values(Kind::kLora, Kind::kLsq, Kind::kQatLora, Kind::kL4Q,
                                           Kind::kQaLora),
                         [](const auto& info) {
                           auto n = testing::kind_name(info.param);
                           std::erase(n, '-');
                           return n;
                         });

// ---------------------------------------------------------------------------
// Structural identities.

TEST(L4qGating, ClippedElementsContributeNothing) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = testing::make_instance(Kind::kL4Q, 300 + seed);
    auto layer = build(p);
    layer->forward(mat(p.in, p.tokens, p.x));
    const auto g = layer->backward(mat(p.out, p.tokens, p.g));
    // Reference dA summing only over in-range positions.
    const auto frozen = testing::freeze(p);
    std::vector<double> dwq(p.out * p.in, 0.0);
    for (std::size_t o = 0; o < p.out; ++o)
      for (std::size_t i = 0; i < p.in; ++i)
        for (std::size_t t = 0; t < p.tokens; ++t)
          dwq[o * p.in + i] += p.g[o * p.tokens + t] * p.x[i * p.tokens + t];
    std::vector<double> da(p.rank * p.in, 0.0);
    for (std::size_t k = 0; k < p.rank; ++k)
      for (std::size_t i = 0; i < p.in; ++i)
        for (std::size_t o = 0; o < p.out; ++o)
          if (frozen.inside[o * p.in + i])
            da[k * p.in + i] += p.alpha * p.b[o * p.rank + k] * dwq[o * p.in + i];
    EXPECT_LT(relative_error(vec(g.dA), da), 1e-12);
  }
}

TEST(L4qReduction, ZeroAlphaReproducesLsqScaleAndBiasGrads) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = testing::make_instance(Kind::kL4Q, 400 + seed);
    p.alpha = 0.0;
    const QuantSpec spec(p.bits, p.group);
    const auto w0 = mat(p.out, p.in, p.w0);
    L4qLayer<double> l4q(w0, {mat(p.rank, p.in, p.a), mat(p.out, p.rank, p.b), 0.0},
                         {params_of(p), spec, false});
    LsqLayer<double> lsq(w0, {params_of(p), spec, false});
    const auto x = mat(p.in, p.tokens, p.x);
    const auto dy = mat(p.out, p.tokens, p.g);
    EXPECT_EQ(l4q.forward(x), lsq.forward(x));
    const auto g1 = l4q.backward(dy);
    const auto g2 = lsq.backward(dy);
    EXPECT_EQ(g1.ds, g2.ds);
    EXPECT_EQ(g1.db, g2.db);
  }
}

TEST(QatLora, EqualsL4qOnlyWhenAdapterIsZero) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = testing::make_instance(Kind::kL4Q, 500 + seed);
    const QuantSpec spec(p.bits, p.group);
    const auto w0 = mat(p.out, p.in, p.w0);
    const auto x = mat(p.in, p.tokens, p.x);
    LoraAdapter<double> ad{mat(p.rank, p.in, p.a), mat(p.out, p.rank, p.b), p.alpha};
    QatLoraLayer<double> qat(w0, ad, {params_of(p), spec, false});
    L4qLayer<double> l4q(w0, ad, {params_of(p), spec, false});
    EXPECT_GT(max_abs_diff(qat.forward(x), l4q.forward(x)), 1e-6);
    ad.B = Matrix<double>(p.out, p.rank);
    QatLoraLayer<double> qat0(w0, ad, {params_of(p), spec, false});
    L4qLayer<double> l4q0(w0, ad, {params_of(p), spec, false});
    EXPECT_EQ(qat0.forward(x), l4q0.forward(x));
  }
}

TEST(QatLora, OnGridZeroBEqualsPlainForward) {
  Rng rng(17);
  const QuantSpec spec(4, 4);
  Matrix<double> w0(3, 8);
  for (auto& v : w0.values()) v = 0.5 * static_cast<double>(static_cast<int>(rng.below(16)) - 8);
  QatLoraLayer<double> layer(w0, make_lora<double>(rng, 2, 8, 3, 1.0),
                             {GroupParams<double>(3, 2, 0.5, 0.0), spec, false});
  const auto x = randn<double>(rng, 8, 2, 1.0);
  EXPECT_EQ(layer.forward(x), matmul(w0, x));
}

TEST(FrozenBase, W0NeverChanges) {
  auto p = testing::make_instance(Kind::kL4Q, 18);
  for (Kind k : {Kind::kLora, Kind::kQatLora, Kind::kL4Q}) {
    p.kind = k;
    auto layer = build(p);
    const auto x = mat(p.in, p.tokens, p.x);
    AdamW opt;
    for (int it = 0; it < 5; ++it) {
      layer->forward(x);
      layer->backward(mat(p.out, p.tokens, p.g));
      opt.step(layer->parameters(), 0.05);
    }
    if (auto* l = dynamic_cast<L4qLayer<double>*>(layer.get())) {
      EXPECT_EQ(vec(l->base_weight()), p.w0);
    } else if (auto* q = dynamic_cast<QatLoraLayer<double>*>(layer.get())) {
      EXPECT_EQ(vec(q->base_weight()), p.w0);
    } else if (auto* r = dynamic_cast<LoraLayer<double>*>(layer.get())) {
      EXPECT_EQ(vec(r->base_weight()), p.w0);
    }
  }
}

TEST(FreezeBias, DropsBiasFromTrainableSet) {
  auto p = testing::make_instance(Kind::kL4Q, 19);
  L4qLayer<double> layer(mat(p.out, p.in, p.w0),
                         {mat(p.rank, p.in, p.a), mat(p.out, p.rank, p.b), p.alpha},
                         {params_of(p), QuantSpec(p.bits, p.group), true});
  for (const auto& slot : layer.parameters()) EXPECT_NE(slot.kind, ParamKind::kBias);
}

// ---------------------------------------------------------------------------
// Group-constrained adapter merge.

TEST(QaloraMerge, HandExample) {
  LoraAdapter<double> ad{Matrix<double>{{0.5}}, Matrix<double>{{0.1}}, 1.0};
  GroupParams<double> p(1, 1, 0.3, 0.2);
  const auto merged = qalora_merge(ad, p);
  EXPECT_NEAR(merged.biases[0], 0.15, 1e-15);
  EXPECT_EQ(merged.scales[0], 0.3);
}

TEST(QaloraMerge, ZeroBLeavesBiasesUnchanged) {
  Rng rng(20);
  LoraAdapter<double> ad{randn<double>(rng, 2, 3, 1.0), Matrix<double>(4, 2), 1.0};
  GroupParams<double> p(4, 3, 0.1, 0.0);
  for (auto& b : p.biases) b = rng.normal();
  EXPECT_EQ(qalora_merge(ad, p), p);
}

TEST(QaloraMerge, RejectsGroupCountMismatch) {
  Rng rng(21);
  LoraAdapter<double> ad{randn<double>(rng, 2, 5, 1.0), randn<double>(rng, 4, 2, 1.0), 1.0};
  EXPECT_THROW(qalora_merge(ad, GroupParams<double>(4, 3)), ShapeError);
}

TEST(QaloraMerge, MergedForwardEqualsAdapterForward) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = testing::make_instance(Kind::kQaLora, 600 + seed);
    const QuantSpec spec(p.bits, p.group);
    QaLoraLayer<double> layer(mat(p.out, p.in, p.w0),
                              {mat(p.rank, p.a_cols(), p.a), mat(p.out, p.rank, p.b), p.alpha},
                              params_of(p), spec);
    const auto x = mat(p.in, p.tokens, p.x);
    const auto before = layer.forward(x);
    const auto merged = dequantize(layer.codes(), layer.merged_params(), p.group);
    EXPECT_LT(max_abs_diff(matmul(merged, x), before), 1e-10);
  }
}

}  // namespace
}  // namespace l4q
