#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "ladabert/distill.hpp"

using namespace ladabert;

namespace {

const ModelConfig kCfg{};

std::vector<double> softmax_ref(const std::vector<double>& z) {
  std::vector<double> out(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += std::exp(z[i]);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::exp(z[i]) / s;
  return out;
}

DistillConfig prediction_only() {
  DistillConfig c;
  c.embedding_weight = c.attention_weight = c.hidden_weight = 0.0;
  return c;
}

}  // namespace

TEST(MseLoss, Examples) {
  const Matrix a = Matrix::from_rows({{1, 2}});
  EXPECT_EQ(mse_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(mse_loss(a, Matrix(1, 2)), 2.5);
  EXPECT_EQ(mse_loss(Matrix(3, 3), Matrix(3, 3)), 0.0);
  EXPECT_THROW(mse_loss(a, Matrix(2, 1)), ShapeError);
}

TEST(PredictionLoss, UniformIsLogTwo) {
  EXPECT_NEAR(prediction_loss(std::vector<double>{0, 0}, std::vector<double>{0, 0}, 1.0),
              std::log(2.0), 1e-12);
}

TEST(PredictionLoss, ConfidentMatchIsNearZero) {
  EXPECT_LE(prediction_loss(std::vector<double>{10, -10}, std::vector<double>{10, -10}, 1.0), 1e-7);
}

TEST(PredictionLoss, ShiftInvariance) {
  for (double c : {-50.0, -1.0, 0.0, 3.5, 700.0}) {
    EXPECT_NEAR(prediction_loss(std::vector<double>{0, 0}, std::vector<double>{c, c}, 1.0),
                std::log(2.0), 1e-12);
  }
}

TEST(PredictionLoss, FormulaAsPrintedTeacherUntempered) {
  const std::vector<double> t = {1.0, -0.5, 2.0};
  const std::vector<double> s = {0.3, 0.1, -1.2};
  const double temp = 2.5;
  const auto p = softmax_ref(t);
  std::vector<double> scaled = s;
  for (double& v : scaled) v /= temp;
  const auto q = softmax_ref(scaled);
  double want = 0;
  for (std::size_t i = 0; i < 3; ++i) want -= p[i] * std::log(q[i]);
  EXPECT_NEAR(prediction_loss(t, s, temp), want, 1e-12);

  std::vector<double> t_scaled = t;
  for (double& v : t_scaled) v /= temp;
  const auto p_sym = softmax_ref(t_scaled);
  double want_sym = 0;
  for (std::size_t i = 0; i < 3; ++i) want_sym -= p_sym[i] * std::log(q[i]);
  EXPECT_NEAR(prediction_loss(t, s, temp, true), want_sym, 1e-12);
  // The two readings agree at t = 1.
  EXPECT_DOUBLE_EQ(prediction_loss(t, s, 1.0, true), prediction_loss(t, s, 1.0, false));
}

TEST(PredictionLoss, CrossEntropyBoundedByTeacherEntropy) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> t(4), s(4);
    for (auto& v : t) v = 2 * rng.normal();
    for (auto& v : s) v = 2 * rng.normal();
    const auto p = softmax_ref(t);
    double entropy = 0;
    for (double v : p) entropy -= v * std::log(v);
    EXPECT_GE(prediction_loss(t, s, 1.0), entropy - 1e-12);
    EXPECT_NEAR(prediction_loss(t, t, 1.0), entropy, 1e-12);
  }
}

TEST(PredictionLoss, Errors) {
  EXPECT_THROW(prediction_loss(std::vector<double>{0, 0}, std::vector<double>{0}, 1.0), ShapeError);
  EXPECT_THROW(prediction_loss(std::vector<double>{0}, std::vector<double>{0}, 0.0), RangeError);
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  EXPECT_NO_THROW(c.validate());
  c.temperature = 0;
  EXPECT_THROW(c.validate(), RangeError);
  c = {};
  c.hidden_weight = -1;
  EXPECT_THROW(c.validate(), RangeError);
  c = {};
  c.embedding_weight = c.attention_weight = c.hidden_weight = c.prediction_weight = 0;
  EXPECT_THROW(c.validate(), RangeError);
}

TEST(TotalDistillLoss, SelfDistillationLeavesOnlyPredictionEntropy) {
  const ParamBundle p = gradcheck::jittered_params(kCfg, 1);
  const ForwardTrace tr = forward(kCfg, p, TokenSeq{4, 8, 15, 16, 23, 42});
  const LossBreakdown l = total_distill_loss(tr, tr, DistillConfig{});
  EXPECT_EQ(l.embedding, 0.0);
  EXPECT_EQ(l.attention, 0.0);
  EXPECT_EQ(l.hidden, 0.0);
  const auto probs = softmax_ref(tr.logits);
  double entropy = 0;
  for (double v : probs) entropy -= v * std::log(v);
  EXPECT_NEAR(l.prediction, entropy, 1e-12);
  EXPECT_NEAR(l.total, entropy, 1e-12);
}

TEST(TotalDistillLoss, UniformLogitsGiveLogClasses) {
  ForwardTrace t;
  t.embedding_out = Matrix(2, 2);
  t.logits = {0.0, 0.0, 0.0};
  const LossBreakdown l = total_distill_loss(t, t, prediction_only());
  EXPECT_NEAR(l.total, std::log(3.0), 1e-12);
}

TEST(TotalDistillLoss, ConstantEmbeddingOffset) {
  const ParamBundle p = gradcheck::jittered_params(kCfg, 2);
  const ForwardTrace teacher = forward(kCfg, p, TokenSeq{1, 2, 3});
  ForwardTrace student = teacher;
  for (double& v : student.embedding_out.data()) v += 1.0;
  const LossBreakdown l = total_distill_loss(teacher, student, DistillConfig{});
  EXPECT_NEAR(l.embedding, 1.0, 1e-12);
  EXPECT_NEAR(l.total, 1.0 + l.prediction, 1e-12);
}

TEST(TotalDistillLoss, LayerCountMismatchIsMappingError) {
  const ParamBundle p = init_params(kCfg, 2);
  const ForwardTrace teacher = forward(kCfg, p, TokenSeq{1, 2, 3});
  ForwardTrace student = teacher;
  student.hidden.pop_back();
  student.attention.pop_back();
  EXPECT_THROW(total_distill_loss(teacher, student, DistillConfig{}), MappingError);
}

TEST(TotalDistillLoss, HardLabelTermNeedsLabel) {
  const ParamBundle p = init_params(kCfg, 2);
  const ForwardTrace tr = forward(kCfg, p, TokenSeq{1, 2, 3});
  DistillConfig c;
  c.hard_label_weight = 0.5;
  EXPECT_THROW(total_distill_loss(tr, tr, c), RangeError);
  const LossBreakdown l = total_distill_loss(tr, tr, c, 1);
  EXPECT_NEAR(l.hard_label, -std::log(softmax_ref(tr.logits)[1]), 1e-12);
}

TEST(TotalDistillLoss, InvariantToBatchOrder) {
  const ParamBundle teacher = gradcheck::jittered_params(kCfg, 3);
  const ParamBundle student = gradcheck::jittered_params(kCfg, 4);
  std::vector<TokenSeq> inputs;
  for (std::uint64_t s = 0; s < 6; ++s) inputs.push_back(gradcheck::random_tokens(kCfg, 4 + s, s));
  auto sum = [&](const std::vector<TokenSeq>& xs) {
    LossBreakdown acc;
    for (const auto& x : xs) {
      acc += total_distill_loss(forward(kCfg, teacher, x), forward(kCfg, student, x), DistillConfig{});
    }
    return acc;
  };
  const LossBreakdown a = sum(inputs);
  std::reverse(inputs.begin(), inputs.end());
  const LossBreakdown b = sum(inputs);
  EXPECT_NEAR(a.embedding, b.embedding, 1e-12);
  EXPECT_NEAR(a.attention, b.attention, 1e-12);
  EXPECT_NEAR(a.hidden, b.hidden, 1e-12);
  EXPECT_NEAR(a.prediction, b.prediction, 1e-12);
}

TEST(TotalDistillLoss, GradientMatchesFiniteDifferences) {
  const ParamBundle teacher = gradcheck::jittered_params(kCfg, 5);
  const CompressedModel student = gradcheck::factored_student(gradcheck::jittered_params(kCfg, 6));
  const TokenSeq tokens = gradcheck::random_tokens(kCfg, 8, 7);
  const ForwardTrace tt = forward(kCfg, teacher, tokens);
  DistillConfig cfg;
  cfg.embedding_weight = 0.7;
  cfg.attention_weight = 3.0;
  cfg.hidden_weight = 1.3;
  cfg.prediction_weight = 0.9;
  cfg.temperature = 2.0;
  cfg.hard_label_weight = 0.4;
  const ForwardTrace st = forward(kCfg, student.params, tokens);
  const ParamBundle analytic =
      backward(kCfg, student.params, st, distill_terms(tt, st, cfg, 2).grad);
  const auto results = gradcheck::check(
      student.params, analytic,
      [&](const ParamBundle& q) {
        return total_distill_loss(tt, forward(kCfg, q, tokens), cfg, 2).total;
      },
      8);
  for (const auto& [cls, r] : results) EXPECT_LT(r.worst, gradcheck::kTolerance) << cls;
}

namespace {

struct StepFixture {
  ParamBundle teacher = gradcheck::jittered_params(kCfg, 9);
  std::vector<TokenSeq> tokens;
  std::vector<ForwardTrace> traces;
  std::vector<DistillExample> batch;

  StepFixture() {
    for (std::uint64_t s = 0; s < 4; ++s) tokens.push_back(gradcheck::random_tokens(kCfg, 6, s));
    for (const auto& t : tokens) traces.push_back(forward(kCfg, teacher, t));
    for (std::size_t i = 0; i < tokens.size(); ++i) batch.push_back({&tokens[i], &traces[i], 0});
  }
};

}  // namespace

TEST(DistillStep, ZeroLearningRateLeavesParametersUnchanged) {
  StepFixture f;
  ParamBundle student = gradcheck::jittered_params(kCfg, 10);
  const ParamBundle before = student;
  Adam adam(AdamConfig{.learning_rate = 0.0});
  const LossBreakdown l = distill_step(kCfg, student, adam, f.batch, DistillConfig{});
  EXPECT_EQ(student, before);
  EXPECT_GT(l.total, 0.0);
}

TEST(DistillStep, SelfDistillationKeepsMseTermsAtZero) {
  StepFixture f;
  ParamBundle student = f.teacher;
  Adam adam(AdamConfig{.learning_rate = 1e-3});
  distill_step(kCfg, student, adam, f.batch, DistillConfig{});
  LossBreakdown after;
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    after += total_distill_loss(f.traces[i], forward(kCfg, student, f.tokens[i]), DistillConfig{});
  }
  EXPECT_LE(after.embedding, 1e-10);
  EXPECT_LE(after.attention, 1e-10);
  EXPECT_LE(after.hidden, 1e-10);
}

TEST(DistillStep, MaskedEntriesStayZeroAndLossIsBatchMean) {
  StepFixture f;
  CompressedModel student = gradcheck::factored_student(gradcheck::jittered_params(kCfg, 11));
  Adam adam(AdamConfig{.learning_rate = 1e-2});
  UpdateConstraints c{&student.masks, {Group::classifier}};
  const Matrix cls_before = student.params.at("classifier.weight");
  LossBreakdown expect;
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    expect += total_distill_loss(f.traces[i], forward(kCfg, student.params, f.tokens[i]), DistillConfig{});
  }
  for (int step = 0; step < 3; ++step) {
    const LossBreakdown l = distill_step(kCfg, student.params, adam, f.batch, DistillConfig{}, c);
    if (step == 0) {
      EXPECT_NEAR(l.total, expect.total / 4.0, 1e-12);
    }
  }
  for (const auto& [name, mask] : student.masks) {
    const auto d = student.params.at(name).data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (!mask.at_flat(k)) {
        EXPECT_EQ(d[k], 0.0) << name;
      }
  }
  EXPECT_EQ(student.params.at("classifier.weight"), cls_before);
}

TEST(DistillStep, EmptyBatchRejected) {
  ParamBundle student = init_params(kCfg, 0);
  Adam adam;
  EXPECT_THROW(distill_step(kCfg, student, adam, {}, DistillConfig{}), RangeError);
}
