#include <gtest/gtest.h>

#include <cmath>

#include "flatlora/diagnostics.hpp"
#include "flatlora/optimizers.hpp"
#include "oracles.hpp"

using namespace flatlora;

namespace {

double max_param_diff(const Network& x, const Network& y) {
  double d = 0.0;
  for (std::size_t l = 0; l < x.layers.size(); ++l) {
    d = std::max(d, oracle::max_diff(x.layers[l].b(), y.layers[l].b()));
    d = std::max(d, oracle::max_diff(x.layers[l].a(), y.layers[l].a()));
  }
  return d;
}

Network scalar_net(double b, double a) {
  Network net;
  net.activation = Activation::identity;
  net.layers.emplace_back(Matrix(1, 1), Matrix{{b}}, Matrix{{a}}, 1.0);
  return net;
}

const BaseUpdateConfig kBase{0.05, 0.9, 1e-3};

}  // namespace

TEST(RhoSchedule, Values) {
  EXPECT_DOUBLE_EQ(rho_at(0.1, 1, RhoSchedule::inverse_sqrt), 0.1);
  EXPECT_DOUBLE_EQ(rho_at(0.1, 4, RhoSchedule::inverse_sqrt), 0.05);
  EXPECT_DOUBLE_EQ(rho_at(0.1, 7, RhoSchedule::constant), 0.1);
  EXPECT_THROW(rho_at(0.1, 0, RhoSchedule::constant), DomainError);
}

TEST(SamDirection, StandardAndSigned) {
  const std::vector<double> g{3, 4};
  const SamDirection d = sam_direction(g, 1.0, DirectionVariant::standard);
  EXPECT_NEAR(d.values[0], 0.6, 1e-15);
  EXPECT_NEAR(d.values[1], 0.8, 1e-15);
  const std::vector<double> h{-3, 4};
  const SamDirection s = sam_direction(h, 1.0, DirectionVariant::sign_scaled);
  EXPECT_NEAR(s.values[0], 0.6, 1e-15);
  EXPECT_NEAR(s.values[1], 0.8, 1e-15);
}

TEST(SamDirection, NormIsRhoAndZeroGradientDegenerates) {
  Rng rng(1);
  const std::vector<double> g = rng.normal_vector(17);
  for (auto v : {DirectionVariant::standard, DirectionVariant::sign_scaled}) {
    EXPECT_NEAR(norm2(sam_direction(g, 0.37, v).values), 0.37, 1e-12);
  }
  const SamDirection z = sam_direction(std::vector<double>(4, 0.0), 1.0,
                                       DirectionVariant::standard);
  EXPECT_TRUE(z.degenerate);
  EXPECT_EQ(norm2(z.values), 0.0);
  EXPECT_THROW(sam_direction(g, -1.0, DirectionVariant::standard), DomainError);
}

TEST(Reconstruction, ZeroGradientsGiveZero) {
  Rng rng(2);
  const Matrix a = rng.normal_matrix(2, 5), b = rng.normal_matrix(4, 2);
  EXPECT_EQ(reconstruct_full_gradient(Matrix(4, 2), Matrix(2, 5), a, b, 1.0), Matrix(4, 5));
}

TEST(Reconstruction, EqualsAverageOfProjectedTrueGradient) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const oracle::NetShape shape = oracle::random_shape(rng, 8, 2);
    const Network net = oracle::random_net(rng, shape);
    const Batch batch = oracle::random_batch(rng, net, 3);
    const GradientSet g = backward(net, batch, true);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const auto& L = net.layers[l];
      const Matrix& gw = *g.layers[l].grad_w;
      // Projectors from the pseudo-inverse, which the linalg suite checks
      // against the Penrose conditions.
      const Matrix pa = oracle::matmul(pseudo_inverse(L.a()), L.a());
      const Matrix pb = oracle::matmul(L.b(), pseudo_inverse(L.b()));
      Matrix expect = oracle::matmul(gw, pa);
      expect += oracle::matmul(pb, gw);
      expect *= 0.5;
      const Matrix got = reconstruct_full_gradient(g.layers[l].grad_b, g.layers[l].grad_a,
                                                   L.a(), L.b(), L.scale());
      ASSERT_LT(oracle::max_diff(got, expect), 1e-9);
    }
  }
}

TEST(Reconstruction, FullRankSquareRecoversTrueGradient) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(5);
    Network net;
    net.activation = Activation::identity;
    net.layers.emplace_back(rng.normal_matrix(n, n),
                            rng.normal_matrix(n, n) + Matrix::identity(n) * 3.0,
                            rng.normal_matrix(n, n) + Matrix::identity(n) * 3.0, 0.7);
    const Batch batch = oracle::random_batch(rng, net, 4);
    const GradientSet g = backward(net, batch, true);
    const auto& L = net.layers[0];
    EXPECT_LT(oracle::max_diff(reconstruct_full_gradient(g.layers[0].grad_b,
                                                         g.layers[0].grad_a, L.a(), L.b(),
                                                         L.scale()),
                               *g.layers[0].grad_w),
              1e-9);
  }
}

TEST(Transfer, ZeroAndOrthonormalRows) {
  Rng rng(5);
  const Matrix a = rng.normal_matrix(2, 4);
  EXPECT_EQ(full_to_lowrank_perturbation(Matrix(3, 4), a, 1.0), Matrix(3, 2));
  const double c = std::cos(0.7), s = std::sin(0.7);
  const Matrix q{{c, s, 0, 0}, {0, 0, 0, 1}};
  const Matrix e = rng.normal_matrix(3, 4);
  EXPECT_LT(oracle::max_diff(full_to_lowrank_perturbation(e, q, 1.0),
                             oracle::matmul(e, oracle::transpose(q))),
            1e-12);
}

TEST(Transfer, ProjectedLossMatch) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const Network net = oracle::random_net(rng, oracle::random_shape(rng, 8, 3));
    const Batch batch = oracle::random_batch(rng, net, 4);
    const std::size_t layer = rng.below(net.layers.size());
    const auto& L = net.layers[layer];
    const Matrix e_w = rng.normal_matrix(L.out_dim(), L.in_dim(), 0.05);
    const Matrix e_b = full_to_lowrank_perturbation(e_w, L.a(), L.scale());
    // Left: B shifted by e_b. Right: the projected shift folded into W0.
    Network left = net;
    left.layers[layer].b() += e_b;
    Network right = net;
    const Matrix proj = oracle::matmul(e_w, oracle::matmul(pseudo_inverse(L.a()), L.a()));
    right.layers[layer] = LoRALinear(L.w0() + proj, L.b(), L.a(), L.scale());
    EXPECT_LT(std::abs(oracle::merged_loss(left, batch) - oracle::merged_loss(right, batch)),
              1e-10);
  }
}

TEST(PerturbationFromRho, ZeroRhoAndNorms) {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const Network net = oracle::random_net(rng, oracle::random_shape(rng, 7, 3));
    const Batch batch = oracle::random_batch(rng, net, 3);
    const LowRankPerturbation z = perturbation_from_rho(net, batch, 0.0);
    for (const Matrix& m : z.e_b) EXPECT_EQ(frobenius_norm(m), 0.0);
    const LowRankPerturbation p = perturbation_from_rho(net, batch, 0.3);
    for (const Matrix& m : p.e_w_bar) EXPECT_NEAR(oracle::frob(m), 0.3, 1e-10);
  }
}

TEST(PerturbationFromRho, ExactTransferWhenAInvertible) {
  Rng rng(8);
  Network net;
  net.activation = Activation::identity;
  net.layers.emplace_back(rng.normal_matrix(5, 3), rng.normal_matrix(5, 3),
                          rng.normal_matrix(3, 3) + Matrix::identity(3) * 2.0, 1.3);
  const Batch batch = oracle::random_batch(rng, net, 4);
  const LowRankPerturbation p = perturbation_from_rho(net, batch, 0.2);
  const Matrix back = oracle::matmul(p.e_b[0], net.layers[0].a()) * net.layers[0].scale();
  EXPECT_LT(oracle::max_diff(back, p.e_w_bar[0]), 1e-10);
}

TEST(BaseUpdate, ZeroGradsAndPlainDescent) {
  Rng rng(9);
  Network net = oracle::random_net(rng, {{3, 2}, {1}});
  const Network start = net;
  GradientSet zero;
  zero.layers.push_back({Matrix(2, 1), Matrix(1, 3), std::nullopt});
  MomentumBuffers mb;
  base_update(net, zero, {0.1, 0.9, 0.0}, mb);
  EXPECT_EQ(max_param_diff(net, start), 0.0);

  GradientSet g;
  g.layers.push_back({rng.normal_matrix(2, 1), rng.normal_matrix(1, 3), std::nullopt});
  MomentumBuffers mb2;
  base_update(net, g, {0.1, 0.0, 0.0}, mb2);
  EXPECT_LT(oracle::max_diff(net.layers[0].b(), start.layers[0].b() - g.layers[0].grad_b * 0.1),
            1e-15);
}

TEST(BaseUpdate, TwoMomentumStepsHandUnrolled) {
  const double eta = 0.1, mu = 0.9, lam = 0.01;
  Network net = scalar_net(1.0, 2.0);
  GradientSet g1, g2;
  g1.layers.push_back({Matrix{{0.5}}, Matrix{{-1.0}}, std::nullopt});
  g2.layers.push_back({Matrix{{0.25}}, Matrix{{2.0}}, std::nullopt});
  MomentumBuffers mb;
  base_update(net, g1, {eta, mu, lam}, mb);
  base_update(net, g2, {eta, mu, lam}, mb);
  double b = 1.0, vb = 0.0, a = 2.0, va = 0.0;
  vb = mu * vb + 0.5 + lam * b;   b -= eta * vb;
  va = mu * va - 1.0 + lam * a;   a -= eta * va;
  vb = mu * vb + 0.25 + lam * b;  b -= eta * vb;
  va = mu * va + 2.0 + lam * a;   a -= eta * va;
  EXPECT_NEAR(net.layers[0].b()(0, 0), b, 1e-12);
  EXPECT_NEAR(net.layers[0].a()(0, 0), a, 1e-12);
}

TEST(LoraStep, CompositionAndBudget) {
  Rng rng(10);
  Network net = oracle::random_net(rng, {{4, 3, 2}, {2, 2}});
  const Batch batch = oracle::random_batch(rng, net, 5);
  Network ref = net;
  MomentumBuffers m1, m2;
  EXPECT_EQ(lora_step(net, batch, kBase, m1).grad_evals, 1);
  base_update(ref, backward(ref, batch), kBase, m2);
  EXPECT_LT(max_param_diff(net, ref), 1e-12);
}

TEST(LoraStep, DescendsOnConvexQuadratic) {
  // Only B trains meaningfully when A is fixed by tiny lr on a linear model;
  // with a small step the loss still decreases every step.
  Rng rng(11);
  Network net = oracle::random_net(rng, {{4, 3}, {2}}, Activation::identity);
  const Batch batch = oracle::random_batch(rng, net, 8);
  MomentumBuffers mb;
  double prev = loss(net, batch);
  for (int i = 0; i < 50; ++i) {
    lora_step(net, batch, {1e-3, 0.0, 0.0}, mb);
    const double cur = loss(net, batch);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(LoraSamStep, HandTracedScalar) {
  Network net = scalar_net(1.0, 2.0);
  const Batch batch{Matrix{{1.0}}, Matrix{{0.0}}};
  MomentumBuffers mb;
  const StepStats st = lora_sam_step(net, batch, 0.1, {0.1, 0.0, 0.0}, mb);
  EXPECT_EQ(st.grad_evals, 2);
  // residual 2 -> grads (4, 2) -> E = (+0.1, +0.1); perturbed residual 2.31
  EXPECT_NEAR(net.layers[0].b()(0, 0), 1.0 - 0.1 * 2.31 * 2.1, 1e-12);
  EXPECT_NEAR(net.layers[0].a()(0, 0), 2.0 - 0.1 * 2.31 * 1.1, 1e-12);
  // A step that forgot to revert would have started from 1.1.
  EXPECT_GT(std::abs(net.layers[0].b()(0, 0) - (1.1 - 0.1 * 2.31 * 2.1)), 0.05);
}

TEST(LoraSamStep, PerFactorNormsAreRho) {
  Rng rng(12);
  Network net = oracle::random_net(rng, {{4, 3, 2}, {2, 1}});
  const Batch batch = oracle::random_batch(rng, net, 5);
  MomentumBuffers mb;
  const StepStats st = lora_sam_step(net, batch, 0.2, kBase, mb);
  // two layers, two factors each, every factor perturbed by exactly rho
  EXPECT_NEAR(st.perturb_norm, 0.2 * 2.0, 1e-12);
}

TEST(Degeneration, ZeroRhoMatchesLora) {
  Rng rng(13);
  for (int t = 0; t < 10; ++t) {
    const Network start = oracle::random_net(rng, oracle::random_shape(rng, 6, 3));
    const Batch batch = oracle::random_batch(rng, start, 4);
    Network ref = start, x = start, y = start, z = start;
    MomentumBuffers mr, mx, my, mz;
    PerturbState st = PerturbState::zeros(z, 0.0, 0.9);
    for (int k = 0; k < 3; ++k) {
      lora_step(ref, batch, kBase, mr);
      lora_sam_step(x, batch, 0.0, kBase, mx);
      flat_lora_step(y, batch, 0.0, kBase, my);
      eflat_lora_step(z, batch, st, kBase, mz);
    }
    EXPECT_LT(max_param_diff(ref, x), 1e-12);
    EXPECT_LT(max_param_diff(ref, y), 1e-12);
    EXPECT_LT(max_param_diff(ref, z), 1e-12);
  }
}

TEST(FlatLoraStep, LeavesAUnperturbedAtEvaluationPoint) {
  Rng rng(14);
  Network net = oracle::random_net(rng, {{4, 3}, {2}});
  const Batch batch = oracle::random_batch(rng, net, 5);
  const Network start = net;
  // With a zero learning rate the step must hand back A untouched and B
  // restored, so any residual perturbation on either factor would show.
  MomentumBuffers mb;
  const StepStats st = flat_lora_step(net, batch, 0.5, {1e-300, 0.0, 0.0}, mb);
  EXPECT_EQ(net.layers[0].a(), start.layers[0].a());
  EXPECT_EQ(net.layers[0].b(), start.layers[0].b());
  // The second loss was taken at (B + E^B, A).
  Network probe = start;
  probe.layers[0].b() += perturbation_from_rho(start, batch, 0.5).e_b[0];
  EXPECT_NEAR(st.loss_perturbed, oracle::merged_loss(probe, batch), 1e-12);
}

TEST(FlatLoraStep, MatchesMergedSpaceSamWhenFactorsInvertible) {
  Rng rng(15);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 1 + rng.below(4);
    Network net;
    net.activation = Activation::identity;
    net.layers.emplace_back(rng.normal_matrix(n, n),
                            rng.normal_matrix(n, n) + Matrix::identity(n) * 2.0,
                            rng.normal_matrix(n, n) + Matrix::identity(n) * 2.0, 0.8);
    const Batch batch = oracle::random_batch(rng, net, 6);
    const Matrix gw = *backward(net, batch, true).layers[0].grad_w;
    const double rho = 0.1;
    Network merged = net;
    merged.layers[0] = LoRALinear(net.layers[0].w0() + gw * (rho / oracle::frob(gw)),
                                  net.layers[0].b(), net.layers[0].a(), 0.8);
    MomentumBuffers mb;
    const StepStats st = flat_lora_step(net, batch, rho, kBase, mb);
    EXPECT_NEAR(st.loss_perturbed, oracle::merged_loss(merged, batch), 1e-9);
  }
}

TEST(FlatLoraStep, InjectedSkipRevertChangesResult) {
  Rng rng(16);
  const Network start = oracle::random_net(rng, {{4, 3}, {2}});
  const Batch batch = oracle::random_batch(rng, start, 5);
  Network good = start, bad = start;
  MomentumBuffers m1, m2;
  flat_lora_step(good, batch, 0.1, kBase, m1);
  SamOptions faulty;
  faulty.fault = Fault::skip_revert;
  flat_lora_step(bad, batch, 0.1, kBase, m2, faulty);
  EXPECT_GT(max_param_diff(good, bad), 1e-3);
}

TEST(EflatLoraStep, BetaOneIsInstantaneous) {
  Rng rng(17);
  Network net = oracle::random_net(rng, {{4, 3, 2}, {2, 2}});
  const Batch batch = oracle::random_batch(rng, net, 5);
  PerturbState st = PerturbState::zeros(net, 0.1, 1.0);
  MomentumBuffers mb;
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(eflat_lora_step(net, batch, st, kBase, mb).grad_evals, 1);
    for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(st.ema_e_b[l], st.last_e_b[l]);
  }
}

TEST(EflatLoraStep, FirstEmaIsBetaTimesPerturbation) {
  // With E_1 all twos and beta = 0.5 the EMA is all ones; check the rule on
  // whatever E_1 the step produced.
  Rng rng(18);
  Network net = oracle::random_net(rng, {{3, 2}, {1}});
  const Batch batch = oracle::random_batch(rng, net, 4);
  PerturbState st = PerturbState::zeros(net, 0.1, 0.5);
  MomentumBuffers mb;
  eflat_lora_step(net, batch, st, kBase, mb);
  EXPECT_LT(oracle::max_diff(st.ema_e_b[0], st.last_e_b[0] * 0.5), 1e-18);
  Matrix twos(2, 1, 2.0);
  Matrix ema(2, 1);
  ema *= 0.5;
  ema.add_scaled(twos, 0.5);
  EXPECT_EQ(ema, Matrix(2, 1, 1.0));
}

TEST(EflatLoraStep, MatchesReferenceTrajectoryAndReverts) {
  Rng rng(19);
  const Network start = oracle::random_net(rng, {{5, 4, 2}, {3, 2}});
  const Batch batch = oracle::random_batch(rng, start, 6);
  const double rho0 = 0.2, beta = 0.4;
  Network net = start;
  PerturbState st = PerturbState::zeros(net, rho0, beta);
  MomentumBuffers mb;

  Network ref = start;
  MomentumBuffers mr;
  std::vector<Matrix> ema{Matrix(4, 3), Matrix(2, 2)};
  for (std::size_t t = 1; t <= 3; ++t) {
    eflat_lora_step(net, batch, st, kBase, mb);

    Network probe = ref;
    for (std::size_t l = 0; l < 2; ++l) probe.layers[l].b() += ema[l];
    const GradientSet g = backward(probe, batch);
    const LowRankPerturbation p =
        perturbation_from_gradients(probe, g, rho0 / std::sqrt(double(t)), {});
    base_update(ref, g, kBase, mr);
    for (std::size_t l = 0; l < 2; ++l) {
      ema[l] *= 1.0 - beta;
      ema[l].add_scaled(p.e_b[l], beta);
    }
    EXPECT_TRUE(st.currently_applied);
    Network unperturbed = net;
    PerturbState copy = st;
    remove_ema_perturbation(unperturbed, copy);
    for (std::size_t l = 0; l < 2; ++l) {
      EXPECT_EQ(unperturbed.layers[l].b(), ref.layers[l].b());
      EXPECT_EQ(unperturbed.layers[l].a(), ref.layers[l].a());
      EXPECT_EQ(st.ema_e_b[l], ema[l]);
    }
  }
}

TEST(EflatLoraStep, DeterministicAndStateChecked) {
  Rng rng(20);
  const Network start = oracle::random_net(rng, {{4, 3}, {2}});
  const Batch batch = oracle::random_batch(rng, start, 4);
  auto run = [&] {
    Network n = start;
    PerturbState st = PerturbState::zeros(n, 0.1, 0.9);
    MomentumBuffers mb;
    for (int k = 0; k < 3; ++k) eflat_lora_step(n, batch, st, kBase, mb);
    return n;
  };
  const Network x = run(), y = run();
  EXPECT_EQ(x.layers[0].b(), y.layers[0].b());
  EXPECT_EQ(x.layers[0].a(), y.layers[0].a());

  Network n = start;
  PerturbState st = PerturbState::zeros(n, 0.1, 0.9);
  MomentumBuffers mb;
  eflat_lora_step(n, batch, st, kBase, mb);
  remove_ema_perturbation(n, st);
  EXPECT_THROW(eflat_lora_step(n, batch, st, kBase, mb), StateError);
  apply_ema_perturbation(n, st);
  EXPECT_THROW(apply_ema_perturbation(n, st), StateError);
  EXPECT_NO_THROW(eflat_lora_step(n, batch, st, kBase, mb));
  EXPECT_THROW(PerturbState::zeros(n, 0.1, 0.0), DomainError);
}

TEST(MemoryCounts, SingleLayerExample) {
  Network net;
  net.layers.emplace_back(Matrix(4, 6), Matrix(4, 2), Matrix(2, 6), 1.0);
  EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::lora).trainable, 20u);
  EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::lora).optimizer_extra, 0.0);
  EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::flat_lora).optimizer_extra, 30.0);
  EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::eflat_lora).optimizer_extra, 40.0);
}

TEST(MemoryCounts, RandomArchitectures) {
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    const oracle::NetShape s = oracle::random_shape(rng, 16, 4);
    const Network net = oracle::random_net(rng, s);
    std::size_t expect = 0;
    for (std::size_t l = 0; l < s.ranks.size(); ++l)
      expect += s.dims[l + 1] * s.ranks[l] + s.ranks[l] * s.dims[l];
    EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::lora).trainable, expect);
    EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::flat_lora).optimizer_extra,
              1.5 * double(expect));
    EXPECT_EQ(param_and_memory_counts(net, OptimizerKind::eflat_lora).optimizer_extra,
              2.0 * double(expect));
  }
}

TEST(LowRankOptimizer, UnperturbedScopeRestoresPerturbation) {
  Rng rng(22);
  Network net = oracle::random_net(rng, {{4, 3}, {2}});
  const Batch batch = oracle::random_batch(rng, net, 4);
  LowRankOptimizer::Settings s;
  s.kind = OptimizerKind::eflat_lora;
  s.schedule = RhoSchedule::inverse_sqrt;
  LowRankOptimizer opt(net, s);
  opt.step(net, batch);
  opt.step(net, batch);
  const Matrix perturbed = net.layers[0].b();
  {
    UnperturbedScope scope = opt.unperturbed(net);
    EXPECT_EQ(net.layers[0].b(), opt.perturb_state()->saved_b[0]);
  }
  EXPECT_EQ(net.layers[0].b(), perturbed);
  EXPECT_DOUBLE_EQ(opt.current_rho(), s.rho0 / std::sqrt(2.0));
}
