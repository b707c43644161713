#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ladabert/error.hpp"
#include "ladabert/model.hpp"
#include "ladabert/random.hpp"

namespace ladabert {

struct TaskConfig {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  std::size_t num_classes = 3;
  std::size_t train_size = 2000;
  std::size_t validation_size = 500;
};

struct Example {
  TokenSeq tokens;
  std::size_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Majority-token classification: token t belongs to class t mod C, and the
/// label is the class whose tokens occur most often (ties never generated).
struct SyntheticTask {
  TaskConfig config;
  std::string rule;
  std::vector<Example> train;
  std::vector<Example> validation;
};

namespace detail {

inline std::vector<Example> draw_examples(const TaskConfig& cfg, std::size_t count, Rng& rng) {
  std::vector<Example> out;
  out.reserve(count);
  std::vector<std::size_t> counts(cfg.num_classes);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % cfg.num_classes;
    Example ex;
    ex.label = label;
    ex.tokens.resize(cfg.seq_len);
    while (true) {
      std::fill(counts.begin(), counts.end(), 0);
      for (auto& t : ex.tokens) {
        t = static_cast<std::uint32_t>(rng.below(cfg.vocab_size));
        ++counts[t % cfg.num_classes];
      }
      std::size_t best = 0;
      bool unique = true;
      for (std::size_t c = 1; c < cfg.num_classes; ++c) {
        if (counts[c] > counts[best]) {
          best = c;
          unique = true;
        } else if (counts[c] == counts[best]) {
          unique = false;
        }
      }
      if (unique && best == label) break;
    }
    out.push_back(std::move(ex));
  }
  rng.shuffle(std::span<Example>(out));
  return out;
}

}  // namespace detail

/// Label of a token sequence under the majority rule, or -1 on a tie.
inline int majority_label(const TokenSeq& tokens, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes);
  for (auto t : tokens) ++counts[t % num_classes];
  std::size_t best = 0;
  bool unique = true;
  for (std::size_t c = 1; c < num_classes; ++c) {
    if (counts[c] > counts[best]) {
      best = c;
      unique = true;
    } else if (counts[c] == counts[best]) {
      unique = false;
    }
  }
  return unique ? static_cast<int>(best) : -1;
}

inline SyntheticTask generate_task(const TaskConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.vocab_size < cfg.num_classes || cfg.seq_len == 0 ||
      cfg.train_size == 0) {
    throw RangeError("generate_task: need >= 2 classes, vocab >= classes, non-empty sequences");
  }
  Rng rng(cfg.seed);
  SyntheticTask task;
  task.config = cfg;
  task.rule = "label = argmax_c #{i : token_i mod " + std::to_string(cfg.num_classes) +
              " == c} (unique maximum)";
  task.train = detail::draw_examples(cfg, cfg.train_size, rng);
  task.validation = detail::draw_examples(cfg, cfg.validation_size, rng);
  return task;
}

/// Model shape matching a task, with the default toy widths.
inline ModelConfig model_config_for(const TaskConfig& task) {
  ModelConfig c;
  c.vocab_size = task.vocab_size;
  c.max_seq_len = std::max<std::size_t>(c.max_seq_len, task.seq_len);
  c.num_classes = task.num_classes;
  return c;
}

}  // namespace ladabert
