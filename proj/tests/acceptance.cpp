// Acceptance runner: `acceptance --criterion N` (1-8) or `acceptance --all`.
// Prints one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "bert_layout.hpp"
#include "gradcheck.hpp"
#include "ladabert/ladabert.hpp"
#include "oracles.hpp"

using namespace ladabert;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// 1. SVD correctness.
Outcome svd_correctness() {
  const auto t0 = Clock::now();
  double worst_orth = 0, worst_recon = 0, worst_trunc = 0;
  std::size_t losses = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t m = 1 + rng.below(64), n = 1 + rng.below(48);
    const Matrix w = oracle::gaussian(m, n, seed + 10000);
    const SvdResult s = svd(w);
    const std::size_t p = s.rank();
    const Matrix eye_u = oracle::naive_matmul(oracle::naive_transpose(s.u), s.u);
    const Matrix eye_v = oracle::naive_matmul(oracle::naive_transpose(s.v), s.v);
    Matrix eye(p, p);
    for (std::size_t i = 0; i < p; ++i) eye(i, i) = 1.0;
    worst_orth = std::max({worst_orth, oracle::fro_diff(eye_u, eye), oracle::fro_diff(eye_v, eye)});
    worst_recon = std::max(worst_recon, oracle::fro_diff(reconstruct(s), w));

    const std::size_t r = 1 + rng.below(p);
    double discarded = 0;
    for (std::size_t i = r; i < p; ++i) discarded += s.singular_values[i] * s.singular_values[i];
    const Matrix wr = reconstruct(truncate(s, r));
    const double err = oracle::fro_diff(wr, w);
    worst_trunc = std::max({worst_trunc, std::abs(err - std::sqrt(discarded)),
                            std::abs(truncation_error(s, r) - std::sqrt(discarded))});
    for (std::uint64_t k = 0; k < 100; ++k) {
      const Matrix a = oracle::gaussian(m, r, seed * 1000 + k + 1);
      const Matrix b = oracle::gaussian(r, n, seed * 1000 + k + 500001);
      if (oracle::fro_diff(oracle::naive_matmul(a, b), w) < err) ++losses;
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "orth " << worst_orth << ", recon " << worst_recon << ", trunc " << worst_trunc
     << ", beaten " << losses << "/20000, " << secs << " s";
  return {worst_orth < 1e-8 && worst_recon < 1e-8 && worst_trunc < 1e-8 && losses == 0 && secs < 30,
          os.str()};
}

bool round4_equal(double a, double b) { return std::lround(a * 1e4) == std::lround(b * 1e4); }

// 2. Ratio algebra.
Outcome ratio_algebra() {
  const std::size_t r = rank_for_ratio(768, 768, 0.5);
  const double fr = factor_ratio(768, 768, r);
  const double hr = hybrid_ratio(768, 768, r, 1.0 / 1.56);
  std::ostringstream os;
  os << "rank " << r << ", factor_ratio " << fr << ", hybrid_ratio " << hr;
  return {r == 192 && round4_equal(fr, 0.5) && round4_equal(hr, 0.3205), os.str()};
}

// 3. Fine-grained ratio table against BERT-Base shapes.
Outcome table_consistency() {
  const auto layout = bert::base_layout();
  bool all = true;
  std::ostringstream os;
  for (const auto& row : bert::kTable) {
    const double target = 1.0 / row.overall;
    const CompressionPlan given{target, 1.0 / row.embedding, 1.0 / row.factorization,
                                1.0 / row.pruning};
    const PlanReport rep = plan_check(layout, given);
    const double dev = std::abs(rep.achieved_fraction - target) / target;
    const CompressionPlan solved =
        solve_budget(layout, target, 1.0 / row.embedding, 1.0 / row.factorization);
    const double solved_pruning = 1.0 / solved.p_weight;
    const double solved_overall = 1.0 / plan_check(layout, solved).achieved_fraction;
    const bool ok = dev <= 0.05;
    all = all && ok;
    os << "\n    " << row.name << ": x" << row.overall << " given factors give x"
       << 1.0 / rep.achieved_fraction << " (" << 100 * dev << "% off) " << (ok ? "ok" : "MISS")
       << "; solved pruning x" << solved_pruning << " vs x" << row.pruning << ", overall x"
       << solved_overall;
  }
  return {all, os.str()};
}

// 4. Gradient fidelity.
Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const ModelConfig cfg{};
  double worst = 0;
  std::size_t classes = 0;
  bool enough = true;
  std::string worst_class;
  auto absorb = [&](const std::string& tag, const ParamBundle& params,
                    const std::map<std::string, gradcheck::ClassResult>& res) {
    std::map<std::string, std::size_t> sizes;
    for (const auto& e : params) sizes[gradcheck::param_class(e.name)] += e.value.size();
    for (const auto& [cls, r] : res) {
      ++classes;
      enough = enough && r.checked >= std::min(gradcheck::kPerClass, sizes[cls]);
      if (r.worst > worst) {
        worst = r.worst;
        worst_class = tag + ":" + cls;
      }
    }
  };

  const ParamBundle dense = gradcheck::jittered_params(cfg, 1);
  const CompressedModel factored = gradcheck::factored_student(gradcheck::jittered_params(cfg, 2));
  const TokenSeq tokens = gradcheck::random_tokens(cfg, 9, 3);
  for (const auto* model : {&dense, &factored.params}) {
    const ForwardTrace tr = forward(cfg, *model, tokens);
    const TraceGradient probe = gradcheck::random_probe(tr, 4);
    const ParamBundle analytic = backward(cfg, *model, tr, probe);
    absorb(model == &dense ? "dense" : "factored", *model,
           gradcheck::check(*model, analytic,
                            [&](const ParamBundle& q) {
                              return gradcheck::probe_value(forward(cfg, q, tokens), probe);
                            },
                            5));
  }

  const ForwardTrace teacher = forward(cfg, gradcheck::jittered_params(cfg, 6), tokens);
  DistillConfig dcfg;
  dcfg.temperature = 2.0;
  const ForwardTrace st = forward(cfg, factored.params, tokens);
  const ParamBundle analytic =
      backward(cfg, factored.params, st, distill_terms(teacher, st, dcfg).grad);
  absorb("distill", factored.params,
         gradcheck::check(factored.params, analytic,
                          [&](const ParamBundle& q) {
                            return total_distill_loss(teacher, forward(cfg, q, tokens), dcfg).total;
                          },
                          7));
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << classes << " classes, worst relative error " << worst << " (" << worst_class << "), "
     << secs << " s";
  return {enough && worst < gradcheck::kTolerance && secs < 60, os.str()};
}

// 5. Distillation loss values.
Outcome kd_loss_values() {
  const std::vector<double> zero = {0, 0};
  const double uniform = prediction_loss(zero, zero, 1.0);
  double shift = 0;
  for (double c : {-30.0, -1.0, 2.5, 100.0, 600.0}) {
    const std::vector<double> s = {c, c};
    shift = std::max(shift, std::abs(prediction_loss(zero, s, 1.0) - std::log(2.0)));
  }
  const ModelConfig cfg{};
  const ForwardTrace tr = forward(cfg, gradcheck::jittered_params(cfg, 8), TokenSeq{3, 1, 4, 1, 5, 9});
  const LossBreakdown self = total_distill_loss(tr, tr, DistillConfig{});
  std::ostringstream os;
  os << "uniform " << uniform << ", self MSE " << self.embedding << "/" << self.attention << "/"
     << self.hidden << ", shift deviation " << shift;
  return {std::abs(uniform - std::log(2.0)) <= 1e-9 && self.embedding == 0 &&
              self.attention == 0 && self.hidden == 0 && shift <= 1e-12,
          os.str()};
}

std::optional<std::size_t> first_step_reaching(const std::vector<TrainingRecord>& recs,
                                               double threshold) {
  for (const auto& r : recs)
    if (r.val_accuracy && *r.val_accuracy >= threshold) return r.step;
  return std::nullopt;
}

std::string step_text(std::optional<std::size_t> s) { return s ? std::to_string(*s) : "never"; }

// 6. Iterative compression against pure distillation on the synthetic task.
Outcome pipeline_vs_pure_kd() {
  const auto t0 = Clock::now();
  int faster = 0, better = 0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TaskConfig tc;
    tc.seed = seed;
    const SyntheticTask task = generate_task(tc);
    const ModelConfig cfg = model_config_for(tc);
    SupervisedOptions sopt;
    sopt.seed = seed;
    const SupervisedResult teacher = train_supervised(cfg, task, sopt);
    const double threshold = 0.9 * teacher.validation_accuracy;

    const CompressionPlan plan = solve_budget(teacher.params, 0.4, 0.6, 0.5, 0.8);
    PipelineOptions opt;
    opt.epochs_per_iteration = 2;
    opt.adam.learning_rate = 1e-3;
    opt.eval_every = 10;
    opt.seed = seed;
    const PipelineResult lada = run_pipeline(cfg, teacher.params, plan, task, DistillConfig{}, opt);
    const std::size_t epochs = lada.iterations.size() * opt.epochs_per_iteration;
    const PipelineResult kd = run_pure_kd(cfg, teacher.params, one_shot_compress(teacher.params, plan),
                                          task, DistillConfig{}, epochs, opt);

    const auto s_lada = first_step_reaching(lada.records, threshold);
    const auto s_kd = first_step_reaching(kd.records, threshold);
    const bool f = s_lada && (!s_kd || *s_lada < *s_kd);
    const bool b = lada.final_accuracy >= kd.final_accuracy;
    faster += f;
    better += b;
    os << "\n    seed " << seed << ": teacher " << teacher.validation_accuracy << ", steps to "
       << threshold << ": pipeline " << step_text(s_lada) << " / pure-KD " << step_text(s_kd)
       << ", final " << lada.final_accuracy << " / " << kd.final_accuracy;
  }
  const double secs = seconds_since(t0);
  os << "\n    faster in " << faster << "/5, final >= in " << better << "/5, " << secs << " s";
  return {faster >= 4 && better >= 4 && secs < 600, os.str()};
}

// 7. Bias distribution of hybrid versus pure SVD compression.
Outcome bias_distribution() {
  const auto t0 = Clock::now();
  int narrower = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const BiasStudy s = bias_study(oracle::gaussian(64, 64, seed + 300), 0.2, {0.4, 0.5});
    if (s.hybrid.stddev < s.svd.stddev) ++narrower;
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "hybrid std < SVD std in " << narrower << "/20, " << secs << " s";
  return {narrower >= 18 && secs < 60, os.str()};
}

// 8. Pipeline parameter accounting and determinism.
Outcome pipeline_accounting() {
  TaskConfig tc;
  tc.seed = 21;
  tc.train_size = 256;
  tc.validation_size = 128;
  const SyntheticTask task = generate_task(tc);
  const ModelConfig cfg = model_config_for(tc);
  SupervisedOptions sopt;
  sopt.epochs = 2;
  const ParamBundle teacher = train_supervised(cfg, task, sopt).params;
  const ParamBundle teacher_copy = teacher;
  const CompressionPlan plan = solve_budget(teacher, 0.4, 0.6, 0.5, 0.8);
  PipelineOptions opt;
  opt.adam.learning_rate = 1e-3;
  opt.seed = 2;
  const PipelineResult a = run_pipeline(cfg, teacher, plan, task, DistillConfig{}, opt);
  const PipelineResult b = run_pipeline(cfg, teacher, plan, task, DistillConfig{}, opt);

  const double final_fraction = retained_fraction(a.student, param_count(teacher));
  bool monotone = true;
  double prev = 1.0;
  for (const auto& it : a.iterations) {
    monotone = monotone && it.retained_fraction <= prev;
    prev = it.retained_fraction;
  }
  const bool classifier = a.student.params.at("classifier.weight") == teacher.at("classifier.weight") &&
                          a.student.params.at("classifier.bias") == teacher.at("classifier.bias");
  const bool rerun = a.student.params == b.student.params && a.student.masks == b.student.masks;
  const bool untouched = teacher == teacher_copy;
  std::ostringstream os;
  os << a.iterations.size() << " iterations, final fraction " << final_fraction
     << (monotone ? ", non-increasing" : ", NOT monotone")
     << (classifier ? ", classifier identical" : ", classifier CHANGED")
     << (rerun ? ", rerun identical" : ", rerun DIFFERS");
  return {std::abs(final_fraction - 0.4) <= 0.01 * 0.4 && monotone && classifier && rerun && untouched,
          os.str()};
}

const std::function<Outcome()> kCriteria[] = {
    svd_correctness,   ratio_algebra,        table_consistency,  gradient_fidelity,
    kd_loss_values,    pipeline_vs_pure_kd,  bias_distribution,  pipeline_accounting,
};

const char* const kNames[] = {
    "SVD correctness",      "ratio algebra",     "ratio table consistency", "gradient fidelity",
    "distillation losses",  "pipeline vs pure KD", "bias distribution",     "pipeline accounting",
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int which = 0;
  bool all = false;
  app.add_option("--criterion", which, "criterion number")->check(CLI::Range(1, 8));
  app.add_flag("--all", all, "run every criterion");
  CLI11_PARSE(app, argc, argv);
  if (!all && which == 0) {
    std::cerr << "need --criterion N or --all\n";
    return 2;
  }
  bool ok = true;
  for (int k = 1; k <= 8; ++k) {
    if (!all && k != which) continue;
    Outcome o;
    try {
      o = kCriteria[k - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << kNames[k - 1]
              << "): " << o.detail << std::endl;
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
