// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "msc/config.hpp"
#include "msc/gradcheck.hpp"
#include "msc/layers.hpp"

using namespace msc;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// row vector x (length d) times matrix w (d x e), both flat
std::vector<double> vecmat(const double* x, const std::vector<double>& w, std::size_t d, std::size_t e) {
  std::vector<double> y(e, 0.0);
  for (std::size_t j = 0; j < e; ++j)
    for (std::size_t i = 0; i < d; ++i) y[j] += x[i] * w[i * e + j];
  return y;
}

AttentionParams random_attention(std::size_t d, std::size_t heads, Rng& rng) {
  return {random_tensor({d, d}, rng), random_tensor({d, d}, rng), random_tensor({d, d}, rng),
          random_tensor({d, d}, rng), heads};
}

GruParams random_gru(std::size_t d, Rng& rng, double s = 1.0) {
  GruParams p;
  for (Tensor* t : {&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h}) *t = random_tensor({d, d}, rng, true, -s, s);
  for (Tensor* t : {&p.b_z, &p.b_r, &p.b_h}) *t = random_tensor({d}, rng, true, -s, s);
  return p;
}

// Per-head loop reference for attention on a single batch row.
std::vector<double> attention_ref(const std::vector<double>& xq, const std::vector<double>& xkv, std::size_t tq,
                                  std::size_t tk, std::size_t d, const AttentionParams& p,
                                  const std::vector<int>& key_keep) {
  const std::size_t h = p.heads, dh = d / h;
  std::vector<double> q(tq * d), k(tk * d), v(tk * d);
  for (std::size_t t = 0; t < tq; ++t) {
    auto r = vecmat(&xq[t * d], p.w_q.vec(), d, d);
    std::copy(r.begin(), r.end(), q.begin() + t * d);
  }
  for (std::size_t t = 0; t < tk; ++t) {
    auto rk = vecmat(&xkv[t * d], p.w_k.vec(), d, d);
    auto rv = vecmat(&xkv[t * d], p.w_v.vec(), d, d);
    std::copy(rk.begin(), rk.end(), k.begin() + t * d);
    std::copy(rv.begin(), rv.end(), v.begin() + t * d);
  }
  std::vector<double> concat(tq * d, 0.0);
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<double> s(tk, 0.0);
      double mx = -1e300;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!key_keep[j]) continue;
        for (std::size_t c = 0; c < dh; ++c) s[j] += q[i * d + hh * dh + c] * k[j * d + hh * dh + c];
        s[j] /= std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) z += key_keep[j] ? std::exp(s[j] - mx) : 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        const double w = key_keep[j] ? std::exp(s[j] - mx) / z : 0.0;
        for (std::size_t c = 0; c < dh; ++c) concat[i * d + hh * dh + c] += w * v[j * d + hh * dh + c];
      }
    }
  }
  std::vector<double> out(tq * d);
  for (std::size_t t = 0; t < tq; ++t) {
    auto r = vecmat(&concat[t * d], p.w_o.vec(), d, d);
    std::copy(r.begin(), r.end(), out.begin() + t * d);
  }
  return out;
}

}  // namespace

TEST(Attention, MatchesPerHeadLoopReference) {
  Rng rng(7);
  const std::size_t tq = 3, tk = 4, d = 8;
  auto p = random_attention(d, 2, rng);
  Tensor xq = random_tensor({1, tq, d}, rng);
  Tensor xkv = random_tensor({1, tk, d}, rng);
  Mask mask{{1, 1, 1, tk}, {1, 1, 0, 1}};
  auto out = multi_head_attention(xq, xkv, xkv, &mask, p);
  auto ref = attention_ref(xq.vec(), xkv.vec(), tq, tk, d, p, {1, 1, 0, 1});
  ASSERT_EQ(out.output.shape(), (Shape{1, tq, d}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.output.values()[i], ref[i], 1e-12);
}

TEST(Attention, WeightsAreDistributionsAndIgnoreMaskedKeys) {
  Rng rng(8);
  auto p = random_attention(4, 2, rng);
  Tensor x = random_tensor({2, 5, 4}, rng);
  Mask mask{{2, 1, 1, 5}, {1, 1, 1, 0, 0, 1, 1, 1, 1, 1}};
  auto out = multi_head_attention(x, x, x, &mask, p);
  ASSERT_EQ(out.weights.shape(), (Shape{2, 2, 5, 5}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += out.weights.at({b, h, i, j});
        EXPECT_NEAR(s, 1.0, 1e-12);
        if (b == 0) {
          EXPECT_EQ(out.weights.at({b, h, i, 3}), 0.0);
          EXPECT_EQ(out.weights.at({b, h, i, 4}), 0.0);
        }
      }
}

TEST(Attention, HeadsMustDivideModelWidth) {
  Rng rng(9);
  auto p = random_attention(6, 4, rng);
  Tensor x = random_tensor({1, 2, 6}, rng);
  EXPECT_THROW(multi_head_attention(x, x, x, nullptr, p), ContractViolation);
}

TEST(Attention, RejectsMismatchedKeyWidth) {
  Rng rng(10);
  auto p = random_attention(4, 2, rng);
  Tensor x = random_tensor({1, 2, 4}, rng);
  Tensor k = random_tensor({1, 2, 6}, rng);
  EXPECT_THROW(multi_head_attention(x, k, k, nullptr, p), DimensionError);
}

TEST(Gru, MatchesScalarReference) {
  Rng rng(11);
  const std::size_t d = 5;
  auto p = random_gru(d, rng);
  Tensor c = random_tensor({2, d}, rng);
  Tensor x = random_tensor({2, d}, rng);
  Tensor out = gru_cell(c, x, p);
  for (std::size_t row = 0; row < 2; ++row) {
    const double* cr = &c.values()[row * d];
    const double* xr = &x.values()[row * d];
    auto xz = vecmat(xr, p.w_z.vec(), d, d), cz = vecmat(cr, p.u_z.vec(), d, d);
    auto xrr = vecmat(xr, p.w_r.vec(), d, d), crr = vecmat(cr, p.u_r.vec(), d, d);
    std::vector<double> z(d), r(d), rc(d);
    for (std::size_t j = 0; j < d; ++j) {
      z[j] = sigmoid_ref(xz[j] + cz[j] + p.b_z.values()[j]);
      r[j] = sigmoid_ref(xrr[j] + crr[j] + p.b_r.values()[j]);
      rc[j] = r[j] * cr[j];
    }
    auto xh = vecmat(xr, p.w_h.vec(), d, d), ch = vecmat(rc.data(), p.u_h.vec(), d, d);
    for (std::size_t j = 0; j < d; ++j) {
      const double hc = std::tanh(xh[j] + ch[j] + p.b_h.values()[j]);
      EXPECT_NEAR(out.values()[row * d + j], (1 - z[j]) * cr[j] + z[j] * hc, 1e-12);
    }
  }
}

TEST(Gru, ZeroParametersHalveTheState) {
  const std::size_t d = 3;
  GruParams p;
  for (Tensor* t : {&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h}) *t = Tensor::zeros({d, d});
  for (Tensor* t : {&p.b_z, &p.b_r, &p.b_h}) *t = Tensor::zeros({d});
  Tensor c = Tensor::from({1, d}, {2.0, -4.0, 0.5});
  Tensor x = Tensor::from({1, d}, {9.0, 9.0, 9.0});
  // z = 1/2 and the candidate is tanh(0) = 0
  EXPECT_EQ(gru_cell(c, x, p).vec(), (std::vector<double>{1.0, -2.0, 0.25}));
}

TEST(Gru, SaturatedUpdateGateKeepsState) {
  Rng rng(12);
  const std::size_t d = 3;
  auto p = random_gru(d, rng, 0.1);
  p.b_z = Tensor::full({d}, -60.0);
  Tensor c = random_tensor({1, d}, rng);
  Tensor x = random_tensor({1, d}, rng);
  auto out = gru_cell(c, x, p).vec();
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out[j], c.values()[j], 1e-20 + 1e-12);
}

TEST(Gru, StaysInConvexHullOfStateAndUnitBox) {
  // c' = (1 - z) c + z h with z in (0,1), |h| < 1, so |c'| <= max(|c|, 1).
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    auto p = random_gru(4, rng, 3.0);
    Tensor c = random_tensor({3, 4}, rng, false, -5.0, 5.0);
    Tensor x = random_tensor({3, 4}, rng, false, -5.0, 5.0);
    auto out = gru_cell(c, x, p).vec();
    for (std::size_t i = 0; i < out.size(); ++i) {
      EXPECT_LE(std::abs(out[i]), std::max(std::abs(c.values()[i]), 1.0) + 1e-12);
    }
  }
}

TEST(Gru, RejectsShapeMismatch) {
  Rng rng(13);
  auto p = random_gru(3, rng);
  EXPECT_THROW(gru_cell(Tensor::zeros({1, 3}), Tensor::zeros({2, 3}), p), DimensionError);
}

TEST(PositionalEncoding, KnownValues) {
  Tensor pe = positional_encoding(3, 4);
  EXPECT_DOUBLE_EQ(pe.at({0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(pe.at({0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(pe.at({1, 0}), std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe.at({1, 1}), std::cos(1.0));
  EXPECT_DOUBLE_EQ(pe.at({2, 2}), std::sin(2.0 / 100.0));
  EXPECT_DOUBLE_EQ(pe.at({2, 3}), std::cos(2.0 / 100.0));
}

TEST(Embedding, ScalesAndAddsPositions) {
  Tensor table = Tensor::from({3, 4}, {0, 0, 0, 0, 1, 2, 3, 4, -1, -1, -1, -1});
  TokenMatrix tok{1, 2, {1, 2}};
  Tensor e = embed(tok, table);
  Tensor pe = positional_encoding(2, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(e.at({0, 0, i}), 2.0 * table.at({1, i}) + pe.at({0, i}), 1e-15);
    EXPECT_NEAR(e.at({0, 1, i}), 2.0 * table.at({2, i}) + pe.at({1, i}), 1e-15);
  }
}

TEST(Ffn, MatchesReference) {
  Rng rng(14);
  FfnParams p{random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5, 3}, rng),
              random_tensor({3}, rng)};
  Tensor x = random_tensor({2, 3}, rng);
  auto out = ffn(x, p).vec();
  for (std::size_t row = 0; row < 2; ++row) {
    auto hid = vecmat(&x.values()[row * 3], p.w_1.vec(), 3, 5);
    for (std::size_t j = 0; j < 5; ++j) hid[j] = std::max(0.0, hid[j] + p.b_1.values()[j]);
    auto y = vecmat(hid.data(), p.w_2.vec(), 5, 3);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out[row * 3 + j], y[j] + p.b_2.values()[j], 1e-12);
  }
}

TEST(LayerGradients, AttentionAndGruMatchFiniteDifferences) {
  Rng rng(15);
  auto p = random_attention(4, 2, rng);
  Tensor xq = random_tensor({2, 3, 4}, rng);
  Tensor xkv = random_tensor({2, 2, 4}, rng);
  Tensor w = random_tensor({2, 3, 4}, rng, false);
  Mask mask{{2, 1, 1, 2}, {1, 1, 1, 0}};
  auto r1 = check_gradients(
      "attention", [&] { return sum(mul(multi_head_attention(xq, xkv, xkv, &mask, p).output, w)); },
      {xq, xkv, p.w_q, p.w_k, p.w_v, p.w_o});
  EXPECT_TRUE(r1.passed) << r1.max_rel_error;

  auto g = random_gru(3, rng);
  Tensor c = random_tensor({2, 3}, rng);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor w2 = random_tensor({2, 3}, rng, false);
  auto r2 = check_gradients("gru", [&] { return sum(mul(gru_cell(c, x, g), w2)); },
                            {c, x, g.w_z, g.w_r, g.w_h, g.u_z, g.u_r, g.u_h, g.b_z, g.b_r, g.b_h});
  EXPECT_TRUE(r2.passed) << r2.max_rel_error;
}

TEST(ParamStore, RejectsDuplicatesAndWrongShapes) {
  ParamStore s;
  s.add({"a", {2, 2}, ParamKind::matrix}, Tensor::zeros({2, 2}));
  EXPECT_THROW(s.add({"a", {2, 2}, ParamKind::matrix}, Tensor::zeros({2, 2})), ContractViolation);
  EXPECT_THROW(s.add({"b", {2, 3}, ParamKind::matrix}, Tensor::zeros({2, 2})), DimensionError);
  EXPECT_THROW(s.get("missing"), ContractViolation);
  EXPECT_EQ(s.count(), 4u);
}

TEST(ParamStore, InitialValuesFollowKind) {
  Rng rng(16);
  auto m = initial_value({"m", {6, 10}, ParamKind::matrix}, rng);
  const double bound = std::sqrt(6.0 / 16.0);
  for (double v : m.values()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(initial_value({"g", {3}, ParamKind::norm_gain}, rng).vec(), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(initial_value({"b", {3}, ParamKind::bias}, rng).vec(), (std::vector<double>{0, 0, 0}));
}

// ---------------------------------------------------------------------------
// configuration

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(MscConfig{}.validate()); }

TEST(Config, ViolationsNameTheField) {
  auto expect_field = [](MscConfig c, const std::string& field) {
    try {
      c.validate();
      ADD_FAILURE() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), field);
    }
  };
  MscConfig c;
  c.layers_per_block = {2, 0};
  expect_field(c, "layers_per_block");
  c = MscConfig{};
  c.n_blocks = 3;
  expect_field(c, "layers_per_block");
  c = MscConfig{};
  c.heads = 3;
  expect_field(c, "heads");
  c = MscConfig{};
  c.dp_r = 1.0;
  expect_field(c, "dp_r");
  c = MscConfig{};
  c.n_blocks = 0;
  c.layers_per_block.clear();
  expect_field(c, "n_blocks");
}

TEST(Config, TextRoundTrip) {
  MscConfig m;
  m.n_blocks = 3;
  m.layers_per_block = {1, 2, 3};
  m.mode = Mode::bsc;
  m.dp_a = 0.125;
  m.ablations.per_block_gru = true;
  TrainConfig t;
  t.lr_scale = 0.5;
  t.warmup_steps = 77;
  RunConfig rc = parse_run_config(to_text(m) + to_text(t));
  EXPECT_EQ(to_text(rc.model), to_text(m));
  EXPECT_EQ(to_text(rc.train), to_text(t));
  EXPECT_EQ(rc.model.encoder_depth(), 6u);
}

TEST(Config, UnknownKeyAndBadValuesAreRejected) {
  EXPECT_THROW(parse_run_config("bogus=1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("d_model=abc\n"), ConfigError);
  EXPECT_THROW(parse_run_config("mode=wide\n"), ConfigError);
  EXPECT_NO_THROW(parse_run_config("# comment only\n\nd_model = 16 \n"));
}

TEST(Config, MissingFileIsIoError) {
  EXPECT_THROW(load_run_config("/nonexistent/run.cfg"), IoError);
}

TEST(Config, ModeRoundTrip) {
  for (Mode m : {Mode::baseline, Mode::plain_deep, Mode::bsc, Mode::msc}) EXPECT_EQ(parse_mode(mode_name(m)), m);
}
