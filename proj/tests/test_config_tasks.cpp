#include <gtest/gtest.h>

#include <clocale>

#include "flatlora/config.hpp"
#include "flatlora/experiment.hpp"
#include "flatlora/tasks.hpp"
#include "oracles.hpp"

using namespace flatlora;

TEST(Config, ParsesKeyValueWithComments) {
  const ExperimentConfig c = parse_config_string(
      "# desk run\n"
      "task = two-cluster-classification\n"
      "layer_dims = 8, 6, 2   # widths\n"
      "rank = 2\n"
      "optimizer = eflat-lora\n"
      "rho0 = 0.1\n"
      "rho_schedule = constant\n"
      "direction_variant = signed\n"
      "\n"
      "seed = 17\n");
  EXPECT_EQ(c.task, TaskKind::two_cluster);
  EXPECT_EQ(c.layer_dims, (std::vector<std::size_t>{8, 6, 2}));
  EXPECT_EQ(c.optimizer, OptimizerKind::eflat_lora);
  EXPECT_EQ(c.rho0, 0.1);
  EXPECT_EQ(c.effective_schedule(), RhoSchedule::constant);
  EXPECT_EQ(c.direction_variant, DirectionVariant::sign_scaled);
  EXPECT_EQ(c.seed, 17u);
}

TEST(Config, ScheduleDefaultsPerOptimizer) {
  ExperimentConfig c;
  c.optimizer = OptimizerKind::eflat_lora;
  EXPECT_EQ(c.effective_schedule(), RhoSchedule::inverse_sqrt);
  c.optimizer = OptimizerKind::flat_lora;
  EXPECT_EQ(c.effective_schedule(), RhoSchedule::constant);
}

TEST(Config, ErrorsNameTheirField) {
  ExperimentConfig c;
  c.rank = 20;
  c.beta = 1.0;
  c.eta = 0.0;
  const auto errs = validation_errors(c);
  ASSERT_EQ(errs.size(), 3u);
  EXPECT_EQ(errs[0].rfind("rank:", 0), 0u);
  EXPECT_EQ(errs[1].rfind("beta:", 0), 0u);
  EXPECT_EQ(errs[2].rfind("eta:", 0), 0u);
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW(parse_config_string("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_string("rank = two\n"), ConfigError);
  EXPECT_THROW(parse_config_string("rank 2\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/flatlora.conf"), ConfigError);
}

TEST(Config, RoundTripAndHash) {
  ExperimentConfig c;
  c.optimizer = OptimizerKind::flat_lora;
  c.rho0 = 0.1 + 0.2;  // not exactly representable in short decimal
  c.seed = 5;
  const ExperimentConfig back = parse_config_string(serialize(c));
  EXPECT_EQ(serialize(back), serialize(c));
  EXPECT_EQ(back.rho0, c.rho0);
  EXPECT_EQ(config_hash(c).size(), 16u);
  ExperimentConfig other_seed = c;
  other_seed.seed = 6;
  EXPECT_EQ(config_hash(c), config_hash(other_seed));
  ExperimentConfig other_rho = c;
  other_rho.rho0 = 0.2;
  EXPECT_NE(config_hash(c), config_hash(other_rho));
}

TEST(Config, FormattingIgnoresLocale) {
  const char* prev = std::setlocale(LC_NUMERIC, nullptr);
  const std::string saved = prev ? prev : "C";
  std::setlocale(LC_NUMERIC, "de_DE.UTF-8");  // may be unavailable; harmless
  EXPECT_EQ(detail::format_double(0.5), "0.5");
  EXPECT_EQ(detail::format_double(std::nan("")), "nan");
  std::setlocale(LC_NUMERIC, saved.c_str());
}

TEST(Tasks, SameSeedSameData) {
  ExperimentConfig c;
  c.seed = 3;
  const Task a = generate_task(c), b = generate_task(c);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.targets, b.train.targets);
  EXPECT_EQ(a.eval.inputs, b.eval.inputs);
  BatchSampler s1(a.train, 32, 9), s2(b.train, 32, 9);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(s1.next().inputs, s2.next().inputs);
  c.seed = 4;
  EXPECT_NE(generate_task(c).train.inputs, a.train.inputs);
}

TEST(Tasks, TeacherRealizesNoiselessTargets) {
  ExperimentConfig c;
  c.noise_std = 0.0;
  const Task t = generate_task(c);
  // A network whose frozen base is the teacher and whose B is zero is the
  // teacher itself.
  Rng rng(1);
  const Network teacher = make_network(t.teacher_weights, c.rank, 1.0, t.activation,
                                       LossKind::mse, rng);
  EXPECT_LE(loss(teacher, t.eval), 1e-20);
  // The student's frozen base differs from the teacher.
  const Network student = build_network(c, t);
  EXPECT_GT(loss(student, t.eval), 1e-3);
}

TEST(Tasks, MatrixFactorizationLossIsHalfSquaredDistance) {
  ExperimentConfig c;
  c.task = TaskKind::matrix_factorization;
  c.layer_dims = {3, 5};
  c.rank = 2;
  const Task t = generate_task(c);
  const Network net = oracle::random_net(*std::make_unique<Rng>(2), {{3, 5}, {2}},
                                         Activation::identity);
  const Matrix d = net.layers[0].merged_weight() - t.factor_target;
  EXPECT_NEAR(loss(net, t.train), 0.5 * oracle::frob(d) * oracle::frob(d), 1e-12);
}

TEST(Tasks, TwoClusterLearnableByPlainLora) {
  ExperimentConfig c;
  c.task = TaskKind::two_cluster;
  c.layer_dims = {8, 8, 2};
  c.rank = 2;
  c.steps = 500;
  c.eval_every = 0;
  c.seed = 1;
  const RunResult r = run_experiment(c);
  ASSERT_TRUE(r.summary.final_eval_accuracy.has_value());
  EXPECT_GT(*r.summary.final_eval_accuracy, 0.99);
}

TEST(Tasks, SamplerEpochsCoverDataOnce) {
  ExperimentConfig c;
  c.train_size = 100;
  const Task t = generate_task(c);
  BatchSampler s(t.train, 25, 3);
  EXPECT_EQ(s.epoch_batches().size(), 4u);
  double total = 0.0, seen = 0.0;
  for (std::size_t j = 0; j < 100; ++j) total += t.train.inputs(0, j);
  for (int i = 0; i < 4; ++i) {
    const Batch b = s.next();
    for (std::size_t j = 0; j < b.size(); ++j) seen += b.inputs(0, j);
  }
  EXPECT_NEAR(seen, total, 1e-9);
}
