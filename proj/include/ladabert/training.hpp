#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ladabert/distill.hpp"
#include "ladabert/model.hpp"
#include "ladabert/optimizer.hpp"
#include "ladabert/random.hpp"
#include "ladabert/task.hpp"

namespace ladabert {

inline double evaluate_accuracy(const ModelConfig& cfg, const ParamBundle& params,
                                std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto tr = forward(cfg, params, ex.tokens);
    if (argmax(tr.logits) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

/// Cross-entropy of softmax(logits) against `label` and its logit gradient.
inline double cross_entropy(std::span<const double> logits, std::size_t label,
                            std::vector<double>* grad = nullptr) {
  const auto logp = detail::log_softmax(logits, 1.0);
  if (grad != nullptr) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      (*grad)[i] = std::exp(logp[i]) - (i == label ? 1.0 : 0.0);
    }
  }
  return -logp[label];
}

struct SupervisedOptions {
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  AdamConfig adam{.learning_rate = 3e-3};
  std::uint64_t seed = 0;
};

struct SupervisedResult {
  ParamBundle params;
  std::vector<double> epoch_loss;
  double validation_accuracy = 0.0;
};

/// Trains a dense model from scratch on gold labels (used to build teachers).
inline SupervisedResult train_supervised(const ModelConfig& cfg, const SyntheticTask& task,
                                         const SupervisedOptions& opt) {
  SupervisedResult res{init_params(cfg, opt.seed), {}, 0.0};
  Adam adam(opt.adam);
  Rng rng(opt.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      ParamBundle grads = zeros_like(res.params);
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = task.train[order[i]];
        const auto tr = forward(cfg, res.params, ex.tokens);
        TraceGradient up;
        epoch_loss += cross_entropy(tr.logits, ex.label, &up.logits);
        for (double& g : up.logits) g *= inv;
        accumulate_gradients(cfg, res.params, tr, up, grads);
      }
      adam.step(res.params, grads);
    }
    res.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  res.validation_accuracy = evaluate_accuracy(cfg, res.params, task.validation);
  return res;
}

}  // namespace ladabert
