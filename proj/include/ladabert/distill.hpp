#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/model.hpp"
#include "ladabert/optimizer.hpp"

namespace ladabert {

/// Weights of the four distillation levels and the prediction temperature.
struct DistillConfig {
  double embedding_weight = 1.0;
  double attention_weight = 1.0;
  double hidden_weight = 1.0;
  double prediction_weight = 1.0;
  double temperature = 1.0;
  /// Also divide the teacher logits by the temperature (standard soft targets).
  bool symmetric_temperature = false;
  /// Weight of an extra cross-entropy term on gold labels; 0 disables it.
  double hard_label_weight = 0.0;

  void validate() const {
    for (double w : {embedding_weight, attention_weight, hidden_weight, prediction_weight,
                     hard_label_weight}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw RangeError("DistillConfig: weights must be >= 0");
    }
    if (embedding_weight + attention_weight + hidden_weight + prediction_weight +
            hard_label_weight <=
        0.0) {
      throw RangeError("DistillConfig: at least one weight must be positive");
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw RangeError("DistillConfig: temperature must be positive");
    }
  }
};

struct LossBreakdown {
  double total = 0.0;
  double embedding = 0.0;
  double attention = 0.0;
  double hidden = 0.0;
  double prediction = 0.0;
  double hard_label = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    total += o.total;
    embedding += o.embedding;
    attention += o.attention;
    hidden += o.hidden;
    prediction += o.prediction;
    hard_label += o.hard_label;
    return *this;
  }

  LossBreakdown scaled(double s) const {
    return {total * s, embedding * s, attention * s, hidden * s, prediction * s, hard_label * s};
  }
};

/// Mean of squared elementwise differences.
inline double mse_loss(const Matrix& student, const Matrix& teacher) {
  detail::require_same_shape(student, teacher, "mse_loss");
  double s = 0.0;
  auto a = student.data();
  auto b = teacher.data();
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

namespace detail {

inline std::vector<double> log_softmax(std::span<const double> z, double divisor) {
  double mx = z[0] / divisor;
  for (double v : z) mx = std::max(mx, v / divisor);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v / divisor - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / divisor - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> z, double divisor) {
  auto out = log_softmax(z, divisor);
  for (double& v : out) v = std::exp(v);
  return out;
}

// d mse / d student, scaled by `weight`.
inline Matrix mse_grad(const Matrix& student, const Matrix& teacher, double weight) {
  Matrix g(student.rows(), student.cols());
  auto a = student.data();
  auto b = teacher.data();
  auto d = g.data();
  const double k = 2.0 * weight / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = k * (a[i] - b[i]);
  return g;
}

}  // namespace detail

/// Soft cross-entropy  -softmax(teacher) . log softmax(student / t).
/// With `symmetric`, the teacher logits are divided by t as well.
inline double prediction_loss(std::span<const double> teacher_logits,
                              std::span<const double> student_logits, double temperature,
                              bool symmetric = false) {
  if (teacher_logits.size() != student_logits.size() || teacher_logits.empty()) {
    throw ShapeError("prediction_loss: logit lengths " + std::to_string(teacher_logits.size()) +
                     " and " + std::to_string(student_logits.size()) + " differ");
  }
  if (!(temperature > 0.0)) throw RangeError("prediction_loss: temperature must be positive");
  const auto p = detail::softmax(teacher_logits, symmetric ? temperature : 1.0);
  const auto logq = detail::log_softmax(student_logits, temperature);
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) loss -= p[i] * logq[i];
  return loss;
}

struct DistillTerms {
  LossBreakdown loss;
  TraceGradient grad;  // w.r.t. the student trace
};

/// Weighted sum of embedding, per-layer attention, per-layer hidden and
/// prediction losses for one input, with its gradient w.r.t. the student trace.
inline DistillTerms distill_terms(const ForwardTrace& teacher, const ForwardTrace& student,
                                  const DistillConfig& cfg,
                                  std::optional<std::size_t> label = std::nullopt) {
  cfg.validate();
  if (teacher.num_layers() != student.num_layers() ||
      teacher.attention.size() != student.attention.size()) {
    throw MappingError("distill: teacher has " + std::to_string(teacher.num_layers()) +
                       " layers, student has " + std::to_string(student.num_layers()));
  }
  DistillTerms out;
  auto& L = out.loss;
  auto& G = out.grad;

  L.embedding = mse_loss(student.embedding_out, teacher.embedding_out);
  G.embedding_out = detail::mse_grad(student.embedding_out, teacher.embedding_out,
                                     cfg.embedding_weight);

  const std::size_t layers = student.num_layers();
  G.attention.resize(layers);
  G.hidden.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& sa = student.attention[l];
    const auto& ta = teacher.attention[l];
    if (sa.size() != ta.size()) throw MappingError("distill: head counts differ");
    // Per-layer MSE over all heads' maps.
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t h = 0; h < sa.size(); ++h) {
      sq += mse_loss(sa[h], ta[h]) * static_cast<double>(sa[h].size());
      count += sa[h].size();
    }
    L.attention += sq / static_cast<double>(count);
    G.attention[l].resize(sa.size());
    for (std::size_t h = 0; h < sa.size(); ++h) {
      G.attention[l][h] = detail::mse_grad(
          sa[h], ta[h],
          cfg.attention_weight * static_cast<double>(sa[h].size()) / static_cast<double>(count));
    }
    L.hidden += mse_loss(student.hidden[l], teacher.hidden[l]);
    G.hidden[l] = detail::mse_grad(student.hidden[l], teacher.hidden[l], cfg.hidden_weight);
  }

  L.prediction = prediction_loss(teacher.logits, student.logits, cfg.temperature,
                                 cfg.symmetric_temperature);
  const auto p = detail::softmax(teacher.logits, cfg.symmetric_temperature ? cfg.temperature : 1.0);
  const auto q = detail::softmax(student.logits, cfg.temperature);
  G.logits.assign(q.size(), 0.0);
  for (std::size_t i = 0; i < q.size(); ++i) {
    G.logits[i] = cfg.prediction_weight * (q[i] - p[i]) / cfg.temperature;
  }

  if (cfg.hard_label_weight > 0.0) {
    if (!label || *label >= q.size()) throw RangeError("distill: hard-label term needs a label");
    const auto q1 = detail::softmax(student.logits, 1.0);
    L.hard_label = -std::log(std::max(q1[*label], 1e-300));
    for (std::size_t i = 0; i < q1.size(); ++i) {
      G.logits[i] += cfg.hard_label_weight * (q1[i] - (i == *label ? 1.0 : 0.0));
    }
  }

  L.total = cfg.embedding_weight * L.embedding + cfg.attention_weight * L.attention +
            cfg.hidden_weight * L.hidden + cfg.prediction_weight * L.prediction +
            cfg.hard_label_weight * L.hard_label;
  return out;
}

inline LossBreakdown total_distill_loss(const ForwardTrace& teacher, const ForwardTrace& student,
                                        const DistillConfig& cfg,
                                        std::optional<std::size_t> label = std::nullopt) {
  return distill_terms(teacher, student, cfg, label).loss;
}

/// One student input with its (pre-computed) teacher signals.
struct DistillExample {
  const TokenSeq* tokens = nullptr;
  const ForwardTrace* teacher = nullptr;
  std::size_t label = 0;
};

/// One optimizer step on the batch-mean distillation loss. Returns the mean
/// loss before the update.
inline LossBreakdown distill_step(const ModelConfig& model, ParamBundle& student, Adam& optimizer,
                                  std::span<const DistillExample> batch, const DistillConfig& cfg,
                                  const UpdateConstraints& constraints = {}) {
  if (batch.empty()) throw RangeError("distill_step: empty batch");
  ParamBundle grads = zeros_like(student);
  LossBreakdown sum;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const ForwardTrace st = forward(model, student, *ex.tokens);
    DistillTerms terms = distill_terms(*ex.teacher, st, cfg, ex.label);
    sum += terms.loss;
    accumulate_gradients(model, student, st, terms.grad, grads);
  }
  for (auto& e : grads.mutable_entries())
    for (double& v : e.value.data()) v *= inv;
  if (constraints.masks != nullptr) apply_masks_to_gradients(grads, *constraints.masks);
  const LossBreakdown mean = sum.scaled(inv);
  if (!std::isfinite(mean.total)) throw NumericError("distill_step: non-finite loss");
  optimizer.step(student, grads, constraints);
  return mean;
}

}  // namespace ladabert
