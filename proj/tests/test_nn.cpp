#include <gtest/gtest.h>

#include <cmath>

#include "sslrul/nn.hpp"

using namespace sslrul;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(s.size());
  for (double& x : v) x = u(rng);
  return Tensor::from(s, std::move(v), true);
}

GruLayerParams random_gru(Rng& rng, std::size_t in, std::size_t H) {
  GruLayerParams p;
  for (Tensor* w : {&p.W_z, &p.W_r, &p.W_h}) *w = random_tensor(rng, {in, H});
  for (Tensor* u : {&p.U_z, &p.U_r, &p.U_h}) *u = random_tensor(rng, {H, H});
  for (Tensor* b : {&p.b_iz, &p.b_ir, &p.b_ih, &p.b_hz, &p.b_hr, &p.b_hh}) *b = random_tensor(rng, {1, H});
  return p;
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Plain loops over one sample of the gated recurrence.
std::vector<double> scalar_gru_step(const std::vector<double>& x, const std::vector<double>& h,
                                    const GruLayerParams& p) {
  const std::size_t in = x.size(), H = h.size();
  auto W = [&](const Tensor& t, std::size_t i, std::size_t j) { return t.at(i, j); };
  std::vector<double> z(H), r(H), out(H);
  for (std::size_t j = 0; j < H; ++j) {
    double az = p.b_iz.at(0, j) + p.b_hz.at(0, j);
    double ar = p.b_ir.at(0, j) + p.b_hr.at(0, j);
    for (std::size_t i = 0; i < in; ++i) {
      az += x[i] * W(p.W_z, i, j);
      ar += x[i] * W(p.W_r, i, j);
    }
    for (std::size_t i = 0; i < H; ++i) {
      az += h[i] * W(p.U_z, i, j);
      ar += h[i] * W(p.U_r, i, j);
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  for (std::size_t j = 0; j < H; ++j) {
    double ac = p.b_ih.at(0, j) + p.b_hh.at(0, j);
    for (std::size_t i = 0; i < in; ++i) ac += x[i] * W(p.W_h, i, j);
    for (std::size_t i = 0; i < H; ++i) ac += r[i] * h[i] * W(p.U_h, i, j);
    out[j] = z[j] * std::tanh(ac) + (1.0 - z[j]) * h[j];
  }
  return out;
}

ModelSpec small_spec(ModelKind kind, BackboneArch arch = BackboneArch::AR) {
  ModelSpec s = kind == ModelKind::FineTune ? ModelSpec::finetune(arch) : ModelSpec::pretext(kind, 2);
  s.h = 4;
  s.embed_dim = s.hidden = 3;
  s.backbone_layers = 2;
  s.encoder_layers = 1;
  s.finetune_hidden = 2;
  s.dropout = s.finetune_dropout = 0.0;
  return s;
}

}  // namespace

TEST(ParameterCounts, PaperFigures) {
  EXPECT_EQ(gru_parameter_count(64, 64), 24'960u);
  EXPECT_EQ(gru_parameter_count(64, 64) * 4, 99'840u);
  EXPECT_EQ(linear_parameter_count(3, 64), 256u);

  Model ar = init_params(ModelSpec::finetune(BackboneArch::AR), 1);
  EXPECT_EQ(ar.count_parameters(), 125'121u);
  EXPECT_EQ(ar.count_trainable(), 125'121u);
  ar.apply_freeze(ar.backbone_names());
  EXPECT_EQ(ar.count_trainable(), 25'025u);

  const Model pre = init_params(ModelSpec::pretext(ModelKind::AR), 1);
  EXPECT_EQ(pre.count_parameters(), 256u + 99'840u + linear_parameter_count(64, 3));
}

TEST(ParameterCounts, MspaHeadScalesWithHorizon) {
  for (std::size_t q : {1u, 5u, 10u}) {
    const Model m = init_params(ModelSpec::pretext(ModelKind::MSPA, q), 0);
    const Model ar = init_params(ModelSpec::pretext(ModelKind::AR), 0);
    EXPECT_EQ(m.count_parameters() - ar.count_parameters() + linear_parameter_count(64, 3), 64 * 3 * q + 3 * q);
  }
}

TEST(Gru, ScalarOracleOneUnit) {
  // x = 1, h = 0, W_h = 1, all else 0: z = 0.5, c = tanh(1).
  Rng rng(0);
  GruLayerParams p = random_gru(rng, 1, 1);
  for (Tensor* t : {&p.W_z, &p.W_r, &p.W_h, &p.U_z, &p.U_r, &p.U_h, &p.b_iz, &p.b_ir, &p.b_ih, &p.b_hz, &p.b_hr,
                    &p.b_hh})
    t->mutable_values()[0] = 0.0;
  p.W_h.mutable_values()[0] = 1.0;
  const Tensor h = gru_cell_forward(Tensor::from({1, 1}, {1.0}), Tensor::from({1, 1}, {0.0}), p);
  EXPECT_NEAR(h.item(), 0.5 * std::tanh(1.0), 1e-15);
  EXPECT_NEAR(h.item(), 0.38079, 1e-5);
}

TEST(Gru, BatchedCellMatchesScalarLoops) {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t in = 1 + rep % 4, H = 2 + rep % 5, B = 1 + rep % 3;
    const GruLayerParams p = random_gru(rng, in, H);
    const Tensor x = random_tensor(rng, {B, in}, 2.0);
    const Tensor h = random_tensor(rng, {B, H});
    const Tensor out = gru_cell_forward(x, h, p);
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> xs(in), hs(H);
      for (std::size_t i = 0; i < in; ++i) xs[i] = x.at(b, i);
      for (std::size_t i = 0; i < H; ++i) hs[i] = h.at(b, i);
      const auto want = scalar_gru_step(xs, hs, p);
      for (std::size_t j = 0; j < H; ++j) EXPECT_NEAR(out.at(b, j), want[j], 1e-10);
    }
  }
}

TEST(Gru, LayerEqualsRepeatedCell) {
  Rng rng(4);
  const std::size_t in = 3, H = 4, B = 2, T = 5;
  const GruLayerParams p = random_gru(rng, in, H);
  const Tensor seq = random_tensor(rng, {T * B, in});
  const Tensor out = gru_layer_forward(seq, B, p);
  ASSERT_EQ(out.shape(), (Shape{T * B, H}));
  Tensor h = Tensor::zeros({B, H});
  for (std::size_t t = 0; t < T; ++t) {
    h = gru_cell_forward(slice(seq, 0, t * B, B), h, p);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < H; ++j) EXPECT_NEAR(out.at(t * B + b, j), h.at(b, j), 1e-12);
  }
}

TEST(Gru, OutputBoundedByPreviousStateAndOne) {
  Rng rng(8);
  for (int rep = 0; rep < 50; ++rep) {
    const GruLayerParams p = random_gru(rng, 3, 4);
    const Tensor x = random_tensor(rng, {2, 3}, 5.0);
    const Tensor h = random_tensor(rng, {2, 4}, 3.0);
    const Tensor out = gru_cell_forward(x, h, p);
    for (std::size_t i = 0; i < out.size(); ++i)
      EXPECT_LE(std::abs(out.values()[i]), std::max(std::abs(h.values()[i]), 1.0) + 1e-12);
  }
}

TEST(Gru, ShapeMismatchIsReported) {
  Rng rng(1);
  const GruLayerParams p = random_gru(rng, 3, 4);
  EXPECT_THROW(gru_cell_forward(Tensor::zeros({2, 2}), Tensor::zeros({2, 4}), p), ShapeError);
  EXPECT_THROW(gru_layer_forward(Tensor::zeros({5, 3}), 2, p), ShapeError);
}

TEST(Gru, GradientsMatchFiniteDifferences) {
  Rng rng(31);
  const GruLayerParams p = random_gru(rng, 2, 3);
  const GruLayerParams q = random_gru(rng, 3, 3);
  const Tensor seq = random_tensor(rng, {3 * 2, 2});
  Rng drop(0);
  auto f = [&] { return sum(deep_gru_forward(seq, 2, {p, q}, 0.0, false, drop)); };
  const GradCheckReport r = gradient_check(f, {p.W_z, p.U_h, p.b_hh, q.W_r, q.U_z, q.b_ih, seq});
  EXPECT_TRUE(r.passed) << r.worst;
}

TEST(Model, OutputShapes) {
  Rng rng(0);
  const std::size_t B = 3;
  const Tensor x = random_tensor(rng, {4 * B, 3});
  const Model ae = init_params(small_spec(ModelKind::AE), 1);
  const Model ar = init_params(small_spec(ModelKind::AR), 1);
  const Model ms = init_params(small_spec(ModelKind::MSPA), 1);
  const Model ft = init_params(small_spec(ModelKind::FineTune), 1);
  EXPECT_EQ(ae.forward(x, B, false, rng).shape(), (Shape{4 * B, 3}));
  EXPECT_EQ(ar.forward(x, B, false, rng).shape(), (Shape{B, 3}));
  EXPECT_EQ(ms.forward(x, B, false, rng).shape(), (Shape{B, 6}));
  EXPECT_EQ(ft.forward(x, B, false, rng).shape(), (Shape{B, 1}));
  EXPECT_EQ(ft.embed(x, B, false, rng).shape(), (Shape{4 * B, 3}));
  EXPECT_THROW(ar.forward(random_tensor(rng, {5, 3}), B, false, rng), ShapeError);
}

TEST(Model, BatchElementsAreIndependent) {
  Rng rng(2);
  const Model ft = init_params(small_spec(ModelKind::FineTune), 3);
  const Tensor x = random_tensor(rng, {4 * 2, 3});
  const Tensor both = ft.forward(x, 2, false, rng);
  std::vector<double> first;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t g = 0; g < 3; ++g) first.push_back(x.at(t * 2, g));
  const Tensor one = ft.forward(Tensor::from({4, 3}, first), 1, false, rng);
  EXPECT_NEAR(one.item(), both.values()[0], 1e-12);
}

TEST(Model, FullModelGradients) {
  Rng rng(5);
  const std::size_t B = 2;
  const Tensor x = random_tensor(rng, {4 * B, 3});
  for (ModelKind kind : {ModelKind::AE, ModelKind::AR, ModelKind::MSPA, ModelKind::FineTune}) {
    for (BackboneArch arch : {BackboneArch::AR, BackboneArch::AE}) {
      if (kind != ModelKind::FineTune && arch == BackboneArch::AE) continue;
      Model m = init_params(small_spec(kind, arch), 9);
      Rng drop(0);
      const Tensor y0 = m.forward(x, B, false, drop);
      std::uniform_real_distribution<double> u(-1, 1);
      std::vector<double> tv(y0.size());
      for (double& v : tv) v = u(rng);
      const Tensor target = Tensor::from(y0.shape(), tv);
      std::vector<Tensor> params;
      for (const auto& p : m.parameters()) params.push_back(p.tensor);
      const GradCheckReport r =
          gradient_check([&] { return mse(m.forward(x, B, false, drop), target); }, params);
      EXPECT_TRUE(r.passed) << to_string(kind) << "/" << to_string(arch) << " worst " << r.worst;
    }
  }
}

TEST(Model, InitializationIsSeededAndBounded) {
  const Model a = init_params(ModelSpec::finetune(BackboneArch::AR), 42);
  const Model b = init_params(ModelSpec::finetune(BackboneArch::AR), 42);
  const Model c = init_params(ModelSpec::finetune(BackboneArch::AR), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].tensor.values(), b.parameters()[i].tensor.values());
    differs = differs || a.parameters()[i].tensor.values() != c.parameters()[i].tensor.values();
  }
  EXPECT_TRUE(differs);
  for (const auto& p : a.parameters()) {
    const bool is_bias = p.tensor.rows() == 1;
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.tensor.rows()));
    for (double v : p.tensor.values()) {
      if (is_bias) EXPECT_EQ(v, 0.0) << p.name;
      else EXPECT_LE(std::abs(v), bound) << p.name;
    }
  }
}

TEST(Model, BackboneNamesAndFreeze) {
  Model ar = init_params(ModelSpec::finetune(BackboneArch::AR), 0);
  const FreezeMask names = ar.backbone_names();
  EXPECT_TRUE(names.count("f.W"));
  EXPECT_TRUE(names.count("psi.3.U_h"));
  EXPECT_FALSE(names.count("phi.0.W_z"));
  EXPECT_FALSE(names.count("head.W"));
  Model ae = init_params(ModelSpec::finetune(BackboneArch::AE), 0);
  EXPECT_TRUE(ae.backbone_names().count("theta.1.W_z"));
  EXPECT_FALSE(ae.has_parameter("psi.0.W_z"));
  EXPECT_THROW(ar.apply_freeze({"nope"}), ConfigError);
  EXPECT_EQ(count_trainable(ar, names), 25'025u);
}

TEST(Model, LoadMatchingCopiesBackbone) {
  const Model src = init_params(ModelSpec::pretext(ModelKind::AR), 1);
  Model dst = init_params(ModelSpec::finetune(BackboneArch::AR), 2);
  const FreezeMask copied = dst.load_matching(src, dst.backbone_names());
  EXPECT_EQ(copied.size(), 2u + 4u * 12u);
  for (const auto& p : src.parameters())
    if (copied.count(p.name)) EXPECT_EQ(dst.parameter(p.name).values(), p.tensor.values());
  const Model ae = init_params(ModelSpec::pretext(ModelKind::AE), 1);
  EXPECT_THROW(dst.load_matching(ae, {"psi.3.W_z"}), ConfigError);
}

TEST(Model, SpecValidation) {
  ModelSpec s;
  s.embed_dim = 32;
  EXPECT_THROW(s.validate(), ConfigError);
  s = ModelSpec::pretext(ModelKind::MSPA, 0);
  s.q = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = ModelSpec{};
  s.dropout = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}
