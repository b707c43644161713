// Command-line front end: plan, compress, distill, analyze, check, teacher.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ladabert/ladabert.hpp"

namespace fs = std::filesystem;
using namespace ladabert;

namespace {

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(out, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + out + "' for writing");
  os << text;
  if (!os) throw FormatError("write to '" + out + "' failed");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return parse_csv(is);
}

std::string config_path_for(const std::string& bundle, const std::string& explicit_path) {
  return explicit_path.empty() ? bundle + ".config" : explicit_path;
}

// Mean relative reconstruction error of the compressed matrices, negated.
double reconstruction_score(const ParamBundle& teacher, const CompressionPlan& plan) {
  const CompressedModel m = one_shot_compress(teacher, plan);
  double err = 0.0;
  std::size_t n = 0;
  for (const auto& e : teacher) {
    if (m.params.contains(e.name)) continue;
    const Matrix w = matmul_bt(m.params.at(e.name + ".A"), m.params.at(e.name + ".B"));
    err += relative_error(w, e.value);
    ++n;
  }
  return n == 0 ? 0.0 : -err / static_cast<double>(n);
}

struct PlanArgs {
  std::string bundle, out, config;
  double target = 0.0;
  std::optional<double> p_embd, p_svd;
  std::size_t search = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> task_seed;
  double delta = 0.9;
};

int run_plan(const PlanArgs& a) {
  const ParamBundle teacher = load_bundle(a.bundle);
  CompressionPlan plan;
  if (a.search > 0) {
    PlanEvaluator eval;
    if (a.task_seed) {
      const ModelConfig cfg = load_config(config_path_for(a.bundle, a.config));
      TaskConfig tc;
      tc.seed = *a.task_seed;
      tc.vocab_size = cfg.vocab_size;
      tc.num_classes = cfg.num_classes;
      tc.seq_len = std::min<std::size_t>(tc.seq_len, cfg.max_seq_len);
      auto task = std::make_shared<SyntheticTask>(generate_task(tc));
      eval = [&teacher, cfg, task](const CompressionPlan& p) {
        return evaluate_accuracy(cfg, one_shot_compress(teacher, p).params, task->validation);
      };
    } else {
      eval = [&teacher](const CompressionPlan& p) { return reconstruction_score(teacher, p); };
    }
    plan = random_search(teacher, a.target, a.search, eval, a.seed, a.delta);
  } else {
    if (!a.p_embd || !a.p_svd) throw InputError("plan: give --p-embd and --p-svd, or --search N");
    plan = solve_budget(teacher, a.target, *a.p_embd, *a.p_svd, a.delta);
    plan.seed = a.seed;
  }
  emit(format_plan(plan), a.out);
  const PlanReport rep = plan_check(teacher, plan);
  std::cerr << format_report(rep);
  return rep.ok() ? 0 : 2;
}

int run_check(const std::string& bundle, const std::string& plan_path) {
  const PlanReport rep = plan_check(load_bundle(bundle), load_plan(plan_path));
  std::cout << format_report(rep);
  return rep.ok() ? 0 : 2;
}

int run_compress(const std::string& bundle, const std::string& plan_path, bool one_shot,
                 const std::string& out) {
  if (!one_shot) throw InputError("compress: only --one-shot is supported; use 'distill' to iterate");
  const ParamBundle teacher = load_bundle(bundle);
  Diagnostics diag;
  const CompressedModel m = one_shot_compress(teacher, load_plan(plan_path), &diag);
  for (const auto& w : diag.warnings) std::cerr << "warning: " << w << '\n';
  save_bundle(m.params, out);
  std::cerr << "retained " << m.retained_count() << " of " << param_count(teacher) << " ("
            << retained_fraction(m, param_count(teacher)) << ")\n";
  if (fs::exists(bundle + ".config")) fs::copy_file(bundle + ".config", out + ".config",
                                                    fs::copy_options::overwrite_existing);
  return 0;
}

struct DistillArgs {
  std::string teacher, plan, out, config;
  std::uint64_t task_seed = 0;
  std::size_t epochs = 2;
  std::size_t batch = 32;
  double lr = 2e-5;
  double temperature = 1.0;
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;
};

int run_distill(const DistillArgs& a) {
  const ParamBundle teacher = load_bundle(a.teacher);
  const ModelConfig cfg = load_config(config_path_for(a.teacher, a.config));
  const CompressionPlan plan = load_plan(a.plan);
  TaskConfig tc;
  tc.seed = a.task_seed;
  tc.vocab_size = cfg.vocab_size;
  tc.num_classes = cfg.num_classes;
  tc.seq_len = std::min<std::size_t>(tc.seq_len, cfg.max_seq_len);
  const SyntheticTask task = generate_task(tc);
  DistillConfig dcfg;
  dcfg.temperature = a.temperature;
  PipelineOptions opt;
  opt.epochs_per_iteration = a.epochs;
  opt.batch_size = a.batch;
  opt.adam.learning_rate = a.lr;
  opt.eval_every = a.eval_every;
  opt.seed = a.seed;
  opt.dump_dir = fs::path(a.out);
  fs::create_directories(a.out);
  const PipelineResult res = run_pipeline(cfg, teacher, plan, task, dcfg, opt);
  const fs::path dir(a.out);
  save_bundle(res.student.params, dir / "student.bundle");
  save_config(cfg, dir / "student.bundle.config");
  emit(record_curve(res.records), (dir / "curve.csv").string());
  for (const auto& w : res.diagnostics.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& it : res.iterations) {
    std::cout << "iteration " << it.iteration << " budget " << it.budget << " retained "
              << it.retained_fraction << " acc_after_compress " << it.accuracy_after_compress
              << " acc_after_finetune " << it.accuracy_after_finetune << '\n';
  }
  std::cout << "teacher_accuracy " << evaluate_accuracy(cfg, teacher, task.validation) << '\n'
            << "student_accuracy " << res.final_accuracy << '\n';
  return 0;
}

struct BiasArgs {
  std::string bundle, mode, matrix, out;
  double retain = 0.2;
  std::optional<double> split_svd;
  std::size_t bins = 101;
};

int run_bias(const BiasArgs& a) {
  const auto mode = parse_bias_mode(a.mode);
  if (!mode) throw InputError("analyze bias: unknown mode '" + a.mode + "'");
  const ParamBundle bundle = load_bundle(a.bundle);
  const BundleEntry* entry = nullptr;
  if (!a.matrix.empty()) {
    entry = bundle.find(a.matrix);
    if (entry == nullptr) throw InputError("analyze bias: no entry '" + a.matrix + "'");
  } else {
    for (const auto& e : bundle) {
      if (e.group == Group::encoder && e.value.rows() > 1) {
        entry = &e;
        break;
      }
    }
    if (entry == nullptr) throw InputError("analyze bias: bundle has no dense encoder matrix");
  }
  if (entry->value.rows() == 1) throw InputError("analyze bias: '" + entry->name + "' is a vector");
  const double svd = a.split_svd.value_or(std::min(1.0, 2.0 * a.retain));
  const Matrix c = compress_for_study(entry->value, *mode, a.retain, {svd, a.retain / svd});
  emit(histogram_csv(histogram(bias_matrix(entry->value, c), *mode, a.bins)), a.out);
  return 0;
}

int run_compare(const std::string& a, const std::string& b, const std::string& metric,
                const std::vector<double>& thresholds, const std::string& out) {
  emit(comparison_csv(compare_curves(read_csv(a), read_csv(b), metric, thresholds)), out);
  return 0;
}

int run_teacher(const std::string& out, std::uint64_t task_seed, std::size_t epochs,
                std::uint64_t seed) {
  TaskConfig tc;
  tc.seed = task_seed;
  const SyntheticTask task = generate_task(tc);
  const ModelConfig cfg = model_config_for(tc);
  SupervisedOptions opt;
  opt.epochs = epochs;
  opt.seed = seed;
  const SupervisedResult res = train_supervised(cfg, task, opt);
  save_bundle(res.params, out);
  save_config(cfg, out + ".config");
  std::cout << "validation_accuracy " << res.validation_accuracy << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ladabert: hybrid compression and distillation of toy encoders"};
  app.require_subcommand(1);
  std::function<int()> action;

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Solve a compression plan for a bundle");
  plan->add_option("--bundle", plan_args.bundle, "Teacher bundle")->required();
  plan->add_option("--target", plan_args.target, "Overall retained fraction P")->required();
  auto* pe = plan->add_option("--p-embd", plan_args.p_embd, "Embedding retained fraction");
  auto* ps = plan->add_option("--p-svd", plan_args.p_svd, "Encoder factorization fraction");
  auto* search = plan->add_option("--search", plan_args.search, "Random-search trials");
  search->excludes(pe)->excludes(ps);
  plan->add_option("--seed", plan_args.seed, "Search seed");
  plan->add_option("--task-seed", plan_args.task_seed,
                   "Score search candidates by one-shot accuracy on this task");
  plan->add_option("--config", plan_args.config, "Model config (default <bundle>.config)");
  plan->add_option("--delta", plan_args.delta, "Per-iteration size multiplier");
  plan->add_option("--out", plan_args.out, "Plan file (default stdout)");
  plan->callback([&] { action = [&] { return run_plan(plan_args); }; });

  std::string c_bundle, c_plan, c_out;
  bool c_one_shot = false;
  auto* compress = app.add_subcommand("compress", "Compress a bundle without fine-tuning");
  compress->add_option("--bundle", c_bundle)->required();
  compress->add_option("--plan", c_plan)->required();
  compress->add_flag("--one-shot", c_one_shot, "Apply the full plan in one step");
  compress->add_option("--out", c_out, "Output bundle")->required();
  compress->callback(
      [&] { action = [&] { return run_compress(c_bundle, c_plan, c_one_shot, c_out); }; });

  DistillArgs d;
  auto* distill = app.add_subcommand("distill", "Run the iterative compression pipeline");
  distill->add_option("--teacher", d.teacher)->required();
  distill->add_option("--plan", d.plan)->required();
  distill->add_option("--task-seed", d.task_seed)->required();
  distill->add_option("--out", d.out, "Output directory")->required();
  distill->add_option("--config", d.config, "Model config (default <teacher>.config)");
  distill->add_option("--epochs-per-iteration", d.epochs);
  distill->add_option("--batch-size", d.batch);
  distill->add_option("--lr", d.lr);
  distill->add_option("--temperature", d.temperature);
  distill->add_option("--eval-every", d.eval_every);
  distill->add_option("--seed", d.seed);
  distill->callback([&] { action = [&] { return run_distill(d); }; });

  auto* analyze = app.add_subcommand("analyze", "Bias histograms and curve comparisons");
  analyze->require_subcommand(1);
  BiasArgs b;
  auto* bias = analyze->add_subcommand("bias", "Histogram of compressed - original");
  bias->add_option("--bundle", b.bundle)->required();
  bias->add_option("--mode", b.mode)->required()->check(CLI::IsMember({"prune", "svd", "hybrid"}));
  bias->add_option("--retain", b.retain)->required();
  bias->add_option("--matrix", b.matrix, "Entry name (default first encoder matrix)");
  bias->add_option("--split-svd", b.split_svd, "Hybrid factorization fraction");
  bias->add_option("--bins", b.bins);
  bias->add_option("--out", b.out, "CSV path (default stdout)");
  bias->callback([&] { action = [&] { return run_bias(b); }; });

  std::string cmp_a, cmp_b, cmp_metric = "val_accuracy", cmp_out;
  std::vector<double> thresholds{0.5, 0.8, 0.9};
  auto* compare = analyze->add_subcommand("compare", "Steps-to-threshold for two curves");
  compare->add_option("--a", cmp_a)->required();
  compare->add_option("--b", cmp_b)->required();
  compare->add_option("--metric", cmp_metric);
  compare->add_option("--thresholds", thresholds);
  compare->add_option("--out", cmp_out);
  compare->callback(
      [&] { action = [&] { return run_compare(cmp_a, cmp_b, cmp_metric, thresholds, cmp_out); }; });

  std::string ch_bundle, ch_plan;
  auto* check = app.add_subcommand("check", "Verify a plan against a bundle");
  check->add_option("--bundle", ch_bundle)->required();
  check->add_option("--plan", ch_plan)->required();
  check->callback([&] { action = [&] { return run_check(ch_bundle, ch_plan); }; });

  std::string t_out;
  std::uint64_t t_task_seed = 0, t_seed = 0;
  std::size_t t_epochs = 6;
  auto* teacher = app.add_subcommand("teacher", "Train a dense teacher on the synthetic task");
  teacher->add_option("--out", t_out, "Output bundle")->required();
  teacher->add_option("--task-seed", t_task_seed);
  teacher->add_option("--epochs", t_epochs);
  teacher->add_option("--seed", t_seed);
  teacher->callback(
      [&] { action = [&] { return run_teacher(t_out, t_task_seed, t_epochs, t_seed); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    return action();
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return 2;
  } catch (const ConvergenceError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
