#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/bundle.hpp"
#include "ladabert/error.hpp"
#include "ladabert/factorize.hpp"
#include "ladabert/prune.hpp"
#include "ladabert/random.hpp"

namespace ladabert {

/// Target retained fractions. p_embd applies to embedding matrices (pure SVD),
/// p_svd * p_weight to encoder matrices (SVD then pruning of both factors).
/// Vectors and the classifier group are never compressed.
struct CompressionPlan {
  double p_overall = 1.0;
  double p_embd = 1.0;
  double p_svd = 1.0;
  double p_weight = 1.0;
  /// Size budget multiplier per pipeline iteration.
  double delta = 0.9;
  std::uint64_t seed = 0;
  /// Fraction of |theta| left over when p_weight had to be clamped at 1.
  double unmet = 0.0;

  friend bool operator==(const CompressionPlan&, const CompressionPlan&) = default;
};

/// Budget after each compression event: delta, delta^2, ... clipped to p_overall.
/// Empty when p_overall == 1.
inline std::vector<double> budget_schedule(double p_overall, double delta) {
  detail::require_fraction(p_overall, "budget_schedule");
  if (!(delta > 0.0 && delta < 1.0)) throw RangeError("budget_schedule: delta must be in (0, 1)");
  std::vector<double> out;
  if (p_overall >= 1.0) return out;
  double b = 1.0;
  while (true) {
    b *= delta;
    if (b <= p_overall * (1.0 + 1e-12)) {
      out.push_back(p_overall);
      return out;
    }
    out.push_back(b);
  }
}

inline std::size_t implied_iterations(const CompressionPlan& plan) {
  return budget_schedule(plan.p_overall, plan.delta).size();
}

// ---------------------------------------------------------------------------
// Pure group-count form of the budget constraint
//   P |theta| = P_embd |theta_embd| + P_svd P_weight |theta_encd| + |theta_cls|
// ---------------------------------------------------------------------------

struct GroupSizes {
  double embedding = 0;
  double encoder = 0;
  double classifier = 0;

  double total() const noexcept { return embedding + encoder + classifier; }
};

inline CompressionPlan solve_budget(const GroupSizes& g, double p_overall, double p_embd,
                                    double p_svd) {
  detail::require_fraction(p_overall, "solve_budget");
  detail::require_fraction(p_embd, "solve_budget");
  detail::require_fraction(p_svd, "solve_budget");
  const double numerator = p_overall * g.total() - p_embd * g.embedding - g.classifier;
  if (!(numerator > 0.0) || g.encoder <= 0.0) {
    std::ostringstream os;
    os << "solve_budget: infeasible, encoder budget slack " << numerator << " parameters";
    throw InfeasibleError(os.str(), numerator);
  }
  CompressionPlan plan{p_overall, p_embd, p_svd, numerator / (p_svd * g.encoder)};
  if (plan.p_weight > 1.0) {
    plan.unmet = (numerator - p_svd * g.encoder) / g.total();
    plan.p_weight = 1.0;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Layout-aware form: rank flooring and mask rounding are simulated per matrix.
// ---------------------------------------------------------------------------

enum class EntryRole { fixed, embedding_matrix, encoder_matrix };

inline EntryRole role_of(const LayoutEntry& e) {
  if (e.group == Group::classifier || e.is_vector()) return EntryRole::fixed;
  return e.group == Group::embedding ? EntryRole::embedding_matrix : EntryRole::encoder_matrix;
}

struct GroupAccount {
  double original = 0;
  double target = 0;    // parameters the plan fractions ask for
  double achieved = 0;  // parameters after flooring/rounding

  double target_fraction() const noexcept { return original > 0 ? target / original : 1.0; }
  double achieved_fraction() const noexcept { return original > 0 ? achieved / original : 1.0; }
};

struct PlanReport {
  CompressionPlan plan;
  std::map<Group, GroupAccount> groups;
  double original = 0;
  double achieved = 0;
  double achieved_fraction = 1.0;
  double tolerance = 0.01;
  std::vector<std::string> violations;
  std::vector<std::string> warnings;

  bool ok() const noexcept { return violations.empty(); }
};

inline PlanReport plan_check(const BundleLayout& layout, const CompressionPlan& plan,
                             double relative_tolerance = 0.01) {
  PlanReport rep;
  rep.plan = plan;
  rep.tolerance = relative_tolerance;
  for (Group g : {Group::embedding, Group::encoder, Group::classifier}) rep.groups[g] = {};
  for (const auto& e : layout) {
    const double size = static_cast<double>(e.size());
    auto& acc = rep.groups[e.group];
    acc.original += size;
    switch (role_of(e)) {
      case EntryRole::fixed:
        acc.target += size;
        acc.achieved += size;
        break;
      case EntryRole::embedding_matrix: {
        acc.target += plan.p_embd * size;
        if (plan.p_embd >= 1.0) {
          acc.achieved += size;
          break;
        }
        const std::size_t r = rank_for_ratio(e.rows, e.cols, plan.p_embd);
        acc.achieved += static_cast<double>((e.rows + e.cols) * r);
        if (factor_ratio(e.rows, e.cols, r) > 1.0) {
          rep.warnings.push_back("'" + e.name + "': factorization expands storage");
        }
        break;
      }
      case EntryRole::encoder_matrix: {
        acc.target += plan.p_svd * plan.p_weight * size;
        if (plan.p_svd >= 1.0 && plan.p_weight >= 1.0) {
          acc.achieved += size;
          break;
        }
        const std::size_t r = rank_for_ratio(e.rows, e.cols, plan.p_svd);
        acc.achieved += static_cast<double>(kept_count(plan.p_weight, e.rows * r) +
                                            kept_count(plan.p_weight, e.cols * r));
        if (factor_ratio(e.rows, e.cols, r) > 1.0) {
          rep.warnings.push_back("'" + e.name + "': factorization expands storage");
        }
        break;
      }
    }
  }
  for (const auto& [g, acc] : rep.groups) {
    rep.original += acc.original;
    rep.achieved += acc.achieved;
  }
  rep.achieved_fraction = rep.original > 0 ? rep.achieved / rep.original : 1.0;
  const double gap = rep.achieved_fraction - plan.p_overall;
  if (std::abs(gap) > relative_tolerance * plan.p_overall) {
    std::ostringstream os;
    os << "achieved fraction " << rep.achieved_fraction << " misses target " << plan.p_overall
       << " by " << gap;
    rep.violations.push_back(os.str());
  }
  if (plan.unmet > 0.0) {
    std::ostringstream os;
    os << "p_weight clamped at 1; " << plan.unmet << " of the parameter budget is unmet";
    rep.warnings.push_back(os.str());
  }
  return rep;
}

inline PlanReport plan_check(const ParamBundle& bundle, const CompressionPlan& plan,
                             double relative_tolerance = 0.01) {
  return plan_check(layout_of(bundle), plan, relative_tolerance);
}

/// Solves p_weight so the simulated parameter count hits p_overall exactly
/// (up to mask rounding), using the floored ranks actually produced by
/// p_embd and p_svd rather than the nominal fractions.
inline CompressionPlan solve_budget(const BundleLayout& layout, double p_overall, double p_embd,
                                    double p_svd, double delta = 0.9) {
  detail::require_fraction(p_overall, "solve_budget");
  detail::require_fraction(p_embd, "solve_budget");
  detail::require_fraction(p_svd, "solve_budget");
  double total = 0, spent = 0, factor_storage = 0;
  for (const auto& e : layout) {
    const double size = static_cast<double>(e.size());
    total += size;
    switch (role_of(e)) {
      case EntryRole::fixed:
        spent += size;
        break;
      case EntryRole::embedding_matrix:
        spent += p_embd >= 1.0 ? size
                               : static_cast<double>((e.rows + e.cols) *
                                                     rank_for_ratio(e.rows, e.cols, p_embd));
        break;
      case EntryRole::encoder_matrix:
        factor_storage +=
            p_svd >= 1.0
                ? size
                : static_cast<double>((e.rows + e.cols) * rank_for_ratio(e.rows, e.cols, p_svd));
        break;
    }
  }
  const double numerator = p_overall * total - spent;
  if (!(numerator > 0.0) || factor_storage <= 0.0) {
    std::ostringstream os;
    os << "solve_budget: infeasible, target " << p_overall * total << " of " << total
       << " parameters leaves encoder slack " << numerator;
    throw InfeasibleError(os.str(), numerator);
  }
  CompressionPlan plan{p_overall, p_embd, p_svd, numerator / factor_storage, delta};
  if (plan.p_weight > 1.0) {
    plan.unmet = (numerator - factor_storage) / total;
    plan.p_weight = 1.0;
  }
  return plan;
}

inline CompressionPlan solve_budget(const ParamBundle& bundle, double p_overall, double p_embd,
                                    double p_svd, double delta = 0.9) {
  return solve_budget(layout_of(bundle), p_overall, p_embd, p_svd, delta);
}

/// Maps a plan to a validation score; higher is better.
using PlanEvaluator = std::function<double(const CompressionPlan&)>;

/// Samples (p_embd, p_svd) log-uniformly from [0.15, 1] x [0.3, 0.6], solves
/// p_weight for each, and returns the best-scoring plan that passes plan_check. Ties keep
/// the earliest sample.
inline CompressionPlan random_search(const BundleLayout& layout, double p_overall,
                                     std::size_t trials, const PlanEvaluator& evaluator,
                                     std::uint64_t seed, double delta = 0.9) {
  if (trials < 1) throw RangeError("random_search: trials must be >= 1");
  Rng rng(seed);
  std::optional<CompressionPlan> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < trials; ++t) {
    const double p_embd = std::exp(rng.uniform(std::log(0.15), std::log(1.0)));
    const double p_svd = std::exp(rng.uniform(std::log(0.3), std::log(0.6)));
    CompressionPlan plan;
    try {
      plan = solve_budget(layout, p_overall, p_embd, p_svd, delta);
    } catch (const InfeasibleError&) {
      continue;
    }
    if (!plan_check(layout, plan).ok()) continue;
    plan.seed = seed;
    const double score = evaluator(plan);
    if (!best || score > best_score) {
      best = plan;
      best_score = score;
    }
  }
  if (!best) {
    throw InfeasibleError("random_search: no feasible plan in " + std::to_string(trials) +
                              " trials",
                          0.0);
  }
  return *best;
}

inline CompressionPlan random_search(const ParamBundle& bundle, double p_overall,
                                     std::size_t trials, const PlanEvaluator& evaluator,
                                     std::uint64_t seed, double delta = 0.9) {
  return random_search(layout_of(bundle), p_overall, trials, evaluator, seed, delta);
}

/// Intermediate plan for a pipeline iteration with size budget `budget`.
///
/// The three fine-grained fractions move geometrically from 1 toward the
/// plan's targets, x_k = x^alpha, with alpha chosen so the nominal budget
/// constraint gives `budget`; p_weight is then re-solved against the floored
/// ranks. At budget == p_overall the plan itself is returned.
inline CompressionPlan interpolate_plan(const BundleLayout& layout, const CompressionPlan& plan,
                                        double budget) {
  if (budget <= plan.p_overall * (1.0 + 1e-12)) return plan;
  if (budget >= 1.0) {
    CompressionPlan full = plan;
    full.p_overall = full.p_embd = full.p_svd = full.p_weight = 1.0;
    full.unmet = 0.0;
    return full;
  }
  double total = 0, emb = 0, enc = 0, fixed = 0;
  for (const auto& e : layout) {
    const double size = static_cast<double>(e.size());
    total += size;
    switch (role_of(e)) {
      case EntryRole::fixed:
        fixed += size;
        break;
      case EntryRole::embedding_matrix:
        emb += size;
        break;
      case EntryRole::encoder_matrix:
        enc += size;
        break;
    }
  }
  const double hybrid = plan.p_svd * plan.p_weight;
  auto nominal = [&](double alpha) {
    return (std::pow(plan.p_embd, alpha) * emb + std::pow(hybrid, alpha) * enc + fixed) / total;
  };
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (nominal(mid) > budget ? lo : hi) = mid;
  }
  const double alpha = 0.5 * (lo + hi);
  CompressionPlan step = solve_budget(layout, budget, std::pow(plan.p_embd, alpha),
                                      std::pow(plan.p_svd, alpha), plan.delta);
  step.seed = plan.seed;
  return step;
}

// ---------------------------------------------------------------------------
// Plan files: "key = value" lines, '#' comments.
// ---------------------------------------------------------------------------

inline std::string format_plan(const CompressionPlan& plan) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# ladabert compression plan (retained fractions)\n"
     << "p_overall = " << plan.p_overall << '\n'
     << "p_embd = " << plan.p_embd << '\n'
     << "p_svd = " << plan.p_svd << '\n'
     << "p_weight = " << plan.p_weight << '\n'
     << "delta = " << plan.delta << '\n'
     << "seed = " << plan.seed << '\n'
     << "unmet = " << plan.unmet << '\n';
  return os.str();
}

inline CompressionPlan parse_plan(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw FormatError("plan: expected 'key = value', got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto number = [&](const std::string& key, bool required, double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw FormatError("plan: missing key '" + key + "'");
      return fallback;
    }
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(it->second, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != it->second.size() || !std::isfinite(v)) {
      throw FormatError("plan: bad value for '" + key + "': '" + it->second + "'");
    }
    kv.erase(it);
    return v;
  };
  CompressionPlan plan;
  plan.p_overall = number("p_overall", true, 1.0);
  plan.p_embd = number("p_embd", true, 1.0);
  plan.p_svd = number("p_svd", true, 1.0);
  plan.p_weight = number("p_weight", true, 1.0);
  plan.delta = number("delta", false, 0.9);
  plan.seed = static_cast<std::uint64_t>(number("seed", false, 0.0));
  plan.unmet = number("unmet", false, 0.0);
  if (!kv.empty()) throw FormatError("plan: unknown key '" + kv.begin()->first + "'");
  for (double p : {plan.p_overall, plan.p_embd, plan.p_svd, plan.p_weight}) {
    if (!(p > 0.0 && p <= 1.0)) throw FormatError("plan: fractions must lie in (0, 1]");
  }
  if (!(plan.delta > 0.0 && plan.delta < 1.0)) throw FormatError("plan: delta must lie in (0, 1)");
  return plan;
}

inline void save_plan(const CompressionPlan& plan, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("plan: cannot write '" + path.string() + "'");
  os << format_plan(plan);
}

inline CompressionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("plan: cannot open '" + path.string() + "'");
  return parse_plan(is);
}

inline std::string format_report(const PlanReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "group        original    target_frac  achieved_frac\n";
  for (const auto& [g, acc] : rep.groups) {
    os << std::left << std::setw(12) << to_string(g) << ' ' << std::right << std::setw(10)
       << static_cast<std::uint64_t>(acc.original) << "  " << std::setw(12) << acc.target_fraction()
       << "  " << std::setw(12) << acc.achieved_fraction() << '\n';
  }
  os << "overall      " << std::setw(10) << static_cast<std::uint64_t>(rep.original) << "  "
     << std::setw(12) << rep.plan.p_overall << "  " << std::setw(12) << rep.achieved_fraction
     << '\n';
  for (const auto& w : rep.warnings) os << "warning: " << w << '\n';
  for (const auto& v : rep.violations) os << "violation: " << v << '\n';
  os << (rep.ok() ? "status: ok\n" : "status: violated\n");
  return os.str();
}

}  // namespace ladabert
