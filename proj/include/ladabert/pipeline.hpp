#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/budget.hpp"
#include "ladabert/csv.hpp"
#include "ladabert/distill.hpp"
#include "ladabert/hybrid.hpp"
#include "ladabert/model.hpp"
#include "ladabert/optimizer.hpp"
#include "ladabert/task.hpp"
#include "ladabert/training.hpp"

namespace ladabert {

/// Student parameters plus the pruning masks of its factor matrices.
struct CompressedModel {
  ParamBundle params;
  MaskSet masks;

  /// Stored parameters that survive pruning.
  std::size_t retained_count() const {
    std::size_t n = 0;
    for (const auto& e : params) {
      auto it = masks.find(e.name);
      n += it == masks.end() ? e.value.size() : it->second.count_ones();
    }
    return n;
  }
};

inline double retained_fraction(const CompressedModel& m, std::size_t original) {
  return static_cast<double>(m.retained_count()) / static_cast<double>(original);
}

/// Rebuilds masks from the zero pattern of factor matrices in the encoder
/// group, e.g. after loading a compressed bundle from disk.
inline MaskSet masks_from_zeros(const ParamBundle& params) {
  MaskSet out;
  for (const auto& e : params) {
    if (e.group != Group::encoder || e.value.rows() == 1) continue;
    if (!(e.name.ends_with(".A") || e.name.ends_with(".B"))) continue;
    PruneMask m = PruneMask::ones(e.value.rows(), e.value.cols());
    auto d = e.value.data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (d[k] == 0.0) m.set_flat(k, false);
    out.emplace(e.name, std::move(m));
  }
  return out;
}

namespace detail {

inline std::optional<std::string> factor_base(const ParamBundle& p, const std::string& name,
                                              std::string_view suffix) {
  if (!name.ends_with(suffix)) return std::nullopt;
  std::string base = name.substr(0, name.size() - suffix.size());
  const std::string other = base + (suffix == ".A" ? ".B" : ".A");
  if (!p.contains(other) || p.contains(base)) return std::nullopt;
  return base;
}

}  // namespace detail

/// Applies one compression event at the fractions of `step` to the current
/// effective weights. Factored weights are reconstructed and factorized anew;
/// vectors and the classifier group are copied unchanged.
inline CompressedModel compress_model(const CompressedModel& current, const CompressionPlan& step,
                                      Diagnostics* diag = nullptr) {
  CompressedModel out;
  for (const auto& e : current.params) {
    if (detail::factor_base(current.params, e.name, ".B")) continue;
    std::string base = e.name;
    Matrix w = e.value;
    bool was_factored = false;
    if (auto b = detail::factor_base(current.params, e.name, ".A")) {
      base = *b;
      w = matmul_bt(e.value, current.params.at(base + ".B"));
      was_factored = true;
    }
    const LayoutEntry le{base, e.group, w.rows(), w.cols()};
    const EntryRole role = role_of(le);
    const bool dense =
        role == EntryRole::fixed ||
        (role == EntryRole::embedding_matrix && step.p_embd >= 1.0) ||
        (role == EntryRole::encoder_matrix && step.p_svd >= 1.0 && step.p_weight >= 1.0);
    if (dense && !was_factored) {
      out.params.add(e.name, e.group, e.value);
      if (auto it = current.masks.find(e.name); it != current.masks.end())
        out.masks.emplace(e.name, it->second);
      continue;
    }
    if (role == EntryRole::embedding_matrix) {
      const std::size_t r = step.p_embd >= 1.0 ? std::min(w.rows(), w.cols())
                                              : rank_for_ratio(w.rows(), w.cols(), step.p_embd);
      LowRankPair pair = factorize_rank(w, r, diag);
      out.params.add(base + ".A", e.group, std::move(pair.a));
      out.params.add(base + ".B", e.group, std::move(pair.b));
    } else {
      const std::size_t r = rank_for_ratio(w.rows(), w.cols(), step.p_svd);
      FactoredLayer fl = compress_layer_rank(w, r, step.p_weight, diag);
      out.params.add(base + ".A", e.group, std::move(fl.pair.a));
      out.params.add(base + ".B", e.group, std::move(fl.pair.b));
      out.masks.emplace(base + ".A", std::move(fl.mask_a));
      out.masks.emplace(base + ".B", std::move(fl.mask_b));
    }
  }
  return out;
}

/// Hybrid compression straight to the plan's targets, without fine-tuning.
inline CompressedModel one_shot_compress(const ParamBundle& teacher, const CompressionPlan& plan,
                                         Diagnostics* diag = nullptr) {
  const PlanReport rep = plan_check(teacher, plan);
  if (!rep.ok()) throw InfeasibleError("one_shot_compress: " + rep.violations.front(), 0.0);
  if (plan.p_overall >= 1.0) return {teacher, {}};
  return compress_model({teacher, {}}, plan, diag);
}

struct PipelineOptions {
  std::size_t epochs_per_iteration = 2;
  std::size_t batch_size = 32;
  AdamConfig adam{};
  /// Validation accuracy is logged every `eval_every` steps and at the end of
  /// each iteration; 0 logs only at iteration ends.
  std::size_t eval_every = 0;
  /// Validation examples used for logged accuracies; 0 uses all of them.
  std::size_t eval_examples = 0;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;
  /// Loss increases smaller than this never trip the divergence guard.
  double divergence_floor = 1e-3;
  bool freeze_classifier = true;
  /// Where to write the student and curve if the divergence guard fires.
  std::optional<std::filesystem::path> dump_dir;
};

struct TrainingRecord {
  std::size_t step = 0;  // 1-based, global
  std::size_t iteration = 0;
  double retained_fraction = 1.0;
  LossBreakdown loss;
  std::optional<double> val_accuracy;
};

struct IterationSummary {
  std::size_t iteration = 0;
  double budget = 1.0;
  CompressionPlan plan;
  double retained_fraction = 1.0;
  double accuracy_after_compress = 0.0;
  double accuracy_after_finetune = 0.0;
};

struct PipelineResult {
  CompressedModel student;
  std::vector<TrainingRecord> records;
  std::vector<IterationSummary> iterations;
  Diagnostics diagnostics;
  double final_accuracy = 0.0;
};

inline constexpr std::string_view kCurveHeader =
    "step,iteration,retained_fraction,total,embedding,attention,hidden,prediction,val_accuracy";

/// Training curve as CSV; val_accuracy is blank on rows where it was not measured.
inline std::string record_curve(const std::vector<TrainingRecord>& records) {
  std::ostringstream os;
  os << kCurveHeader << '\n';
  for (const auto& r : records) {
    os << r.step << ',' << r.iteration << ',' << csv_number(r.retained_fraction) << ','
       << csv_number(r.loss.total) << ',' << csv_number(r.loss.embedding) << ','
       << csv_number(r.loss.attention) << ',' << csv_number(r.loss.hidden) << ','
       << csv_number(r.loss.prediction) << ',';
    if (r.val_accuracy) os << csv_number(*r.val_accuracy);
    os << '\n';
  }
  return os.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw FormatError("write to '" + path.string() + "' failed");
}

/// Teacher signals for every training example, without backward caches.
inline std::vector<ForwardTrace> teacher_traces(const ModelConfig& cfg, const ParamBundle& teacher,
                                                const std::vector<Example>& examples) {
  std::vector<ForwardTrace> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back(forward(cfg, teacher, ex.tokens));
    out.back().strip();
  }
  return out;
}

/// Shared distillation loop: runs `epochs` epochs over the training set and
/// appends one record per optimizer step.
class DistillRunner {
 public:
  DistillRunner(const ModelConfig& cfg, const SyntheticTask& task,
                const std::vector<ForwardTrace>& traces, const DistillConfig& dcfg,
                const PipelineOptions& opt, std::size_t original_count)
      : cfg_(cfg),
        task_(task),
        traces_(traces),
        dcfg_(dcfg),
        opt_(opt),
        original_(original_count),
        rng_(opt.seed ^ 0xd157111ULL),
        order_(task.train.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    const std::size_t n = opt.eval_examples == 0
                              ? task.validation.size()
                              : std::min(opt.eval_examples, task.validation.size());
    validation_ = std::span<const Example>(task.validation.data(), n);
  }

  double accuracy(const CompressedModel& m) const {
    return evaluate_accuracy(cfg_, m.params, validation_);
  }

  void run(CompressedModel& student, std::size_t iteration, std::size_t epochs,
           std::vector<TrainingRecord>& records) {
    if (opt_.batch_size == 0) throw RangeError("pipeline: batch size must be positive");
    Adam adam(opt_.adam);
    UpdateConstraints c;
    c.masks = &student.masks;
    if (opt_.freeze_classifier) c.frozen_groups.push_back(Group::classifier);
    const double retained = retained_fraction(student, original_);
    double best = std::numeric_limits<double>::infinity();
    std::vector<DistillExample> batch;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      rng_.shuffle(std::span<std::size_t>(order_));
      for (std::size_t start = 0; start < order_.size(); start += opt_.batch_size) {
        const std::size_t end = std::min(order_.size(), start + opt_.batch_size);
        batch.clear();
        for (std::size_t i = start; i < end; ++i) {
          const std::size_t k = order_[i];
          batch.push_back({&task_.train[k].tokens, &traces_[k], task_.train[k].label});
        }
        TrainingRecord rec;
        rec.step = ++step_;
        rec.iteration = iteration;
        rec.retained_fraction = retained;
        try {
          rec.loss = distill_step(cfg_, student.params, adam, batch, dcfg_, c);
        } catch (const NumericError& e) {
          abort(student, records, std::string("non-finite loss (") + e.what() + ")");
        }
        best = std::min(best, rec.loss.total);
        if (rec.loss.total > opt_.divergence_factor * best &&
            rec.loss.total - best > opt_.divergence_floor) {
          records.push_back(rec);
          std::ostringstream os;
          os << "loss " << rec.loss.total << " exceeds " << opt_.divergence_factor
             << "x the iteration minimum " << best;
          abort(student, records, os.str());
        }
        const bool last = epoch + 1 == epochs && end == order_.size();
        if (last || (opt_.eval_every > 0 && rec.step % opt_.eval_every == 0)) {
          rec.val_accuracy = accuracy(student);
        }
        records.push_back(rec);
      }
    }
  }

  std::size_t steps() const noexcept { return step_; }

 private:
  [[noreturn]] void abort(const CompressedModel& student, const std::vector<TrainingRecord>& records,
                          const std::string& why) const {
    std::string where;
    if (opt_.dump_dir) {
      std::filesystem::create_directories(*opt_.dump_dir);
      save_bundle(student.params, *opt_.dump_dir / "diverged.bundle");
      write_text(*opt_.dump_dir / "diverged_curve.csv", record_curve(records));
      where = "; state dumped to " + opt_.dump_dir->string();
    }
    throw NumericError("pipeline diverged at step " + std::to_string(step_) + ": " + why + where);
  }

  const ModelConfig& cfg_;
  const SyntheticTask& task_;
  const std::vector<ForwardTrace>& traces_;
  DistillConfig dcfg_;
  PipelineOptions opt_;
  std::size_t original_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::span<const Example> validation_;
  std::size_t step_ = 0;
};

}  // namespace detail

/// Iterative hybrid compression: each iteration shrinks the budget by delta,
/// compresses the current student to the interpolated fractions and then
/// fine-tunes it by distillation from the teacher.
inline PipelineResult run_pipeline(const ModelConfig& cfg, const ParamBundle& teacher,
                                   const CompressionPlan& plan, const SyntheticTask& task,
                                   const DistillConfig& dcfg, const PipelineOptions& opt = {}) {
  cfg.validate();
  dcfg.validate();
  const BundleLayout layout = layout_of(teacher);
  const PlanReport rep = plan_check(layout, plan);
  if (!rep.ok()) throw InfeasibleError("run_pipeline: " + rep.violations.front(), 0.0);
  if (task.train.empty()) throw InputError("run_pipeline: empty training set");

  PipelineResult res;
  res.student = {teacher, {}};
  const auto schedule = budget_schedule(plan.p_overall, plan.delta);
  if (schedule.empty()) {
    res.final_accuracy = evaluate_accuracy(cfg, teacher, task.validation);
    return res;
  }
  const std::size_t original = param_count(teacher);
  const auto traces = detail::teacher_traces(cfg, teacher, task.train);
  detail::DistillRunner runner(cfg, task, traces, dcfg, opt, original);

  for (std::size_t k = 0; k < schedule.size(); ++k) {
    IterationSummary it;
    it.iteration = k + 1;
    it.budget = schedule[k];
    it.plan = interpolate_plan(layout, plan, schedule[k]);
    res.student = compress_model(res.student, it.plan, &res.diagnostics);
    it.retained_fraction = retained_fraction(res.student, original);
    it.accuracy_after_compress = runner.accuracy(res.student);
    runner.run(res.student, it.iteration, opt.epochs_per_iteration, res.records);
    it.accuracy_after_finetune = res.records.back().val_accuracy.value_or(0.0);
    res.iterations.push_back(it);
  }
  res.final_accuracy = evaluate_accuracy(cfg, res.student.params, task.validation);
  return res;
}

/// Student with the shapes and mask counts of `like` but freshly initialized
/// weights: norm gains 1, other vectors 0, matrices ~ N(0, init_std^2) and
/// masks re-drawn by magnitude on the new values.
inline CompressedModel reinitialize(const CompressedModel& like, std::uint64_t seed,
                                    double init_std = 0.1) {
  Rng rng(seed);
  CompressedModel out;
  for (const auto& e : like.params) {
    Matrix v;
    if (e.value.rows() == 1) {
      v = Matrix(1, e.value.cols(), e.name.ends_with(".gamma") ? 1.0 : 0.0);
    } else {
      v = random_normal(e.value.rows(), e.value.cols(), rng, init_std);
    }
    if (auto it = like.masks.find(e.name); it != like.masks.end()) {
      const double p =
          static_cast<double>(it->second.count_ones()) / static_cast<double>(v.size());
      PruneMask m = magnitude_mask(v, p);
      v = apply_mask(v, m);
      out.masks.emplace(e.name, std::move(m));
    }
    out.params.add(e.name, e.group, std::move(v));
  }
  return out;
}

/// Baseline: distills into a randomly initialized student of the given shape
/// for `epochs` epochs, with every group trainable.
inline PipelineResult run_pure_kd(const ModelConfig& cfg, const ParamBundle& teacher,
                                  const CompressedModel& shape, const SyntheticTask& task,
                                  const DistillConfig& dcfg, std::size_t epochs,
                                  PipelineOptions opt = {}) {
  cfg.validate();
  dcfg.validate();
  opt.freeze_classifier = false;
  PipelineResult res;
  res.student = reinitialize(shape, opt.seed);
  const std::size_t original = param_count(teacher);
  const auto traces = detail::teacher_traces(cfg, teacher, task.train);
  detail::DistillRunner runner(cfg, task, traces, dcfg, opt, original);
  IterationSummary it;
  it.iteration = 1;
  it.budget = retained_fraction(res.student, original);
  it.retained_fraction = it.budget;
  it.accuracy_after_compress = runner.accuracy(res.student);
  runner.run(res.student, 1, epochs, res.records);
  it.accuracy_after_finetune = res.records.empty() ? it.accuracy_after_compress
                                                   : res.records.back().val_accuracy.value_or(0.0);
  res.iterations.push_back(it);
  res.final_accuracy = evaluate_accuracy(cfg, res.student.params, task.validation);
  return res;
}

}  // namespace ladabert
