#include <gtest/gtest.h>

#include "oracles.hpp"
#include "raypatch/gradcheck.hpp"
#include "raypatch/nn.hpp"

using namespace raypatch;

namespace {

void set_identity(Linear& l) {
  std::fill(l.weight.mutable_data().begin(), l.weight.mutable_data().end(), 0.0);
  for (std::size_t i = 0; i < l.in_features(); ++i) l.weight.at(i * l.out_features() + i) = 1.0;
  std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
}

// Per-head projections, attention, concat, output projection, with loops only.
Tensor mha_oracle(const MultiHeadAttention& m, const Tensor& x, const Tensor& ctx) {
  const Tensor q = oracle::linear(x, m.wq.weight, m.wq.bias);
  const Tensor k = oracle::linear(ctx, m.wk.weight, m.wk.bias);
  const Tensor v = oracle::linear(ctx, m.wv.weight, m.wv.bias);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < m.cfg.heads; ++h) {
    heads.push_back(oracle::attention(oracle::columns(q, h * m.cfg.d_k, m.cfg.d_k),
                                      oracle::columns(k, h * m.cfg.d_k, m.cfg.d_k),
                                      oracle::columns(v, h * m.cfg.d_v, m.cfg.d_v)));
  }
  return oracle::linear(oracle::hconcat(heads), m.wo.weight, m.wo.bias);
}

Tensor block_oracle(const AttnBlock& b, const Tensor& x, const Tensor& ctx) {
  const Tensor h = oracle::layer_norm(oracle::add(x, mha_oracle(b.mha, x, ctx)), b.ln1.gamma, b.ln1.beta);
  const Tensor ff = oracle::linear(oracle::leaky_relu(oracle::linear(h, b.ff1.weight, b.ff1.bias)), b.ff2.weight, b.ff2.bias);
  return oracle::layer_norm(oracle::add(h, ff), b.ln2.gamma, b.ln2.beta);
}

}  // namespace

TEST(Attention, SingleKeyReturnsValue) {
  Rng rng(1);
  const Tensor v = oracle::random({1, 5}, rng);
  const Tensor out = scaled_dot_attention(oracle::random({4, 3}, rng), oracle::random({1, 3}, rng), v);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(out.data()[i * 5 + j], v.data()[j], 1e-15);
}

TEST(Attention, IdenticalKeysAverageValues) {
  const Tensor k({2, 2}, {0.3, -0.7, 0.3, -0.7});
  const Tensor v({2, 2}, {1.0, 4.0, 3.0, -2.0});
  const Tensor out = scaled_dot_attention(Tensor({1, 2}, {0.9, 0.1}), k, v);
  EXPECT_NEAR(out.at(0), 2.0, 1e-15);
  EXPECT_NEAR(out.at(1), 1.0, 1e-15);
}

TEST(Attention, MatchesExpNormalizeOracle) {
  Rng rng(2);
  const Tensor q = oracle::random({3, 4}, rng), k = oracle::random({5, 4}, rng), v = oracle::random({5, 3}, rng);
  EXPECT_LE(oracle::max_abs_diff(scaled_dot_attention(q, k, v), oracle::attention(q, k, v)), 1e-12);
}

TEST(Attention, DimensionMismatchIsShapeError) {
  EXPECT_THROW(scaled_dot_attention(Tensor({2, 3}), Tensor({4, 5}), Tensor({4, 2})), ShapeError);
  EXPECT_THROW(scaled_dot_attention(Tensor({2, 3}), Tensor({4, 3}), Tensor({5, 2})), ShapeError);
}

TEST(Attention, WeightsSumToOne) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const Tensor w = attention_weights(oracle::random({6, 4}, rng, -3, 3), oracle::random({9, 4}, rng, -3, 3));
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) s += w.data()[i * 9 + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Attention, InvariantToJointKvPermutation) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const Tensor q = oracle::random({5, 4}, rng), k = oracle::random({11, 4}, rng), v = oracle::random({11, 6}, rng);
    const auto perm = oracle::random_permutation(11, rng);
    const Tensor a = scaled_dot_attention(q, k, v);
    const Tensor b = scaled_dot_attention(q, oracle::permute_rows(k, perm), oracle::permute_rows(v, perm));
    EXPECT_LE(oracle::max_abs_diff(a, b), 1e-9);
  }
}

TEST(Attention, OutputsInConvexHullOfValues) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const Tensor v = oracle::random({7, 3}, rng, -5, 5);
    const Tensor out = scaled_dot_attention(oracle::random({4, 2}, rng, -4, 4), oracle::random({7, 2}, rng, -4, 4), v);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t j = 0; j < 7; ++j) {
        lo = std::min(lo, v.data()[j * 3 + c]);
        hi = std::max(hi, v.data()[j * 3 + c]);
      }
      for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_GE(out.data()[i * 3 + c], lo - 1e-12);
        EXPECT_LE(out.data()[i * 3 + c], hi + 1e-12);
      }
    }
  }
}

TEST(Mha, SingleIdentityHeadReducesToAttention) {
  Rng rng(6);
  MultiHeadAttention m({4, 1, 4, 4}, rng);
  for (Linear* l : {&m.wq, &m.wk, &m.wv, &m.wo}) set_identity(*l);
  const Tensor x = oracle::random({3, 4}, rng), ctx = oracle::random({5, 4}, rng);
  EXPECT_LE(oracle::max_abs_diff(m.forward(x, ctx), oracle::attention(x, ctx, ctx)), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(m.forward(x, ctx), scaled_dot_attention(x, ctx, ctx)), 1e-15);
}

TEST(Mha, ZeroOutputProjectionGivesZero) {
  Rng rng(7);
  MultiHeadAttention m({8, 2, 4, 4}, rng);
  std::fill(m.wo.weight.mutable_data().begin(), m.wo.weight.mutable_data().end(), 0.0);
  const Tensor y = m.forward(oracle::random({3, 8}, rng), oracle::random({4, 8}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mha, TwoHeadsMatchPerHeadOracle) {
  Rng rng(8);
  MultiHeadAttention m({6, 2, 3, 5}, rng);
  for (Linear* l : {&m.wq, &m.wk, &m.wv, &m.wo})
    for (double& b : l->bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
  const Tensor x = oracle::random({4, 6}, rng), ctx = oracle::random({7, 6}, rng);
  EXPECT_LE(oracle::max_abs_diff(m.forward(x, ctx), mha_oracle(m, x, ctx)), 1e-12);
}

TEST(Mha, RejectsZeroDimensions) {
  Rng rng(9);
  EXPECT_THROW(MultiHeadAttention({8, 0, 4, 4}, rng), ConfigError);
}

TEST(SelfAttnBlock, SingleTokenFiniteAndShaped) {
  Rng rng(10);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  const Tensor x = oracle::random({1, 8}, rng);
  const Tensor y = self_attn_block(b, x);
  EXPECT_EQ(y.shape(), x.shape());
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  // With one token the attention output is that token's value projection.
  const Tensor v = oracle::linear(x, b.mha.wv.weight, b.mha.wv.bias);
  EXPECT_LE(oracle::max_abs_diff(b.mha.forward(x, x), oracle::linear(v, b.mha.wo.weight, b.mha.wo.bias)), 1e-12);
}

TEST(SelfAttnBlock, PermutationEquivariant) {
  Rng rng(11);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = oracle::random({9, 8}, rng);
    const auto perm = oracle::random_permutation(9, rng);
    EXPECT_LE(oracle::max_abs_diff(self_attn_block(b, oracle::permute_rows(x, perm)),
                                   oracle::permute_rows(self_attn_block(b, x), perm)),
              1e-9);
  }
}

TEST(SelfAttnBlock, GradCheck) {
  Rng rng(12);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  const Tensor w = oracle::random({5, 8}, rng);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(mul(self_attn_block(b, x), w)); }, oracle::random({5, 8}, rng)),
            1e-4);
}

TEST(SelfAttnBlock, MatchesComposedOracle) {
  Rng rng(13);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  const Tensor x = oracle::random({6, 8}, rng);
  EXPECT_LE(oracle::max_abs_diff(self_attn_block(b, x), block_oracle(b, x, x)), 1e-10);
}

TEST(CrossAttnBlock, SingleLatentToken) {
  Rng rng(14);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  const Tensor z = oracle::random({1, 8}, rng);
  const Tensor q = oracle::random({5, 8}, rng);
  // Every query attends only to z, so the attention term is the same row for all queries.
  const Tensor a = b.mha.forward(q, z);
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a.data()[i * 8 + j], a.data()[j], 1e-14);
  EXPECT_EQ(cross_attn_block(b, q, z).shape(), q.shape());
}

TEST(CrossAttnBlock, InvariantToLatentPermutation) {
  Rng rng(15);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  for (int t = 0; t < 10; ++t) {
    const Tensor q = oracle::random({4, 8}, rng), z = oracle::random({12, 8}, rng);
    const auto perm = oracle::random_permutation(12, rng);
    EXPECT_LE(oracle::max_abs_diff(cross_attn_block(b, q, z), cross_attn_block(b, q, oracle::permute_rows(z, perm))), 1e-9);
  }
}

TEST(CrossAttnBlock, MatchesComposedOracle) {
  Rng rng(16);
  AttnBlock b({8, 4, 2, 3}, 12, rng);
  const Tensor q = oracle::random({3, 8}, rng), z = oracle::random({7, 8}, rng);
  EXPECT_LE(oracle::max_abs_diff(cross_attn_block(b, q, z), block_oracle(b, q, z)), 1e-10);
}

TEST(CrossAttnBlock, GradCheckThroughLatent) {
  Rng rng(17);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  const Tensor q = oracle::random({3, 8}, rng), w = oracle::random({3, 8}, rng);
  EXPECT_LT(grad_check([&](const Tensor& z) { return sum(mul(cross_attn_block(b, q, z), w)); }, oracle::random({6, 8}, rng)),
            1e-4);
}

TEST(Blocks, ParameterGradCheck) {
  Rng rng(18);
  AttnBlock b({8, 2, 4, 4}, 16, rng);
  TensorList params;
  b.parameters("b", params);
  std::vector<Tensor> ps;
  for (auto& p : params) ps.push_back(p.tensor);
  const Tensor x = oracle::random({4, 8}, rng), z = oracle::random({5, 8}, rng), w = oracle::random({4, 8}, rng);
  EXPECT_LT(grad_check_params([&] { return sum(mul(cross_attn_block(b, x, z), w)); }, ps), 1e-4);
}

TEST(Linear, IdentityWeights) {
  Rng rng(19);
  Linear l(3, 3, rng);
  set_identity(l);
  const Tensor x = oracle::random({2, 3}, rng);
  EXPECT_TRUE(oracle::bit_equal(l.forward(x), x));
}
