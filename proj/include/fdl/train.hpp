#ifndef FDL_TRAIN_HPP
#define FDL_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fdl/adam.hpp"
#include "fdl/autodiff.hpp"
#include "fdl/corpus.hpp"
#include "fdl/log.hpp"
#include "json.hpp"

namespace fdl {

enum class KDialMode { entity_only, all_tokens_alpha };

inline const char* kdial_mode_name(KDialMode m) {
  return m == KDialMode::entity_only ? "entity_only" : "all_tokens_alpha";
}

inline KDialMode parse_kdial_mode(const std::string& s) {
  if (s == "entity_only") return KDialMode::entity_only;
  if (s == "all_tokens_alpha") return KDialMode::all_tokens_alpha;
  throw Error("unknown kdial_mode '" + s + "'");
}

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int warmup_steps = 20;
  int max_seq_len = 64;
  std::uint64_t seed = 0;
  KDialMode kdial_mode = KDialMode::entity_only;
  double clip_norm = 1.0;  // <= 0 disables clipping
  bool strict_entities = false;  // entity mask also requires the token in the knowledge

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || learning_rate <= 0 || warmup_steps < 0 || max_seq_len <= 0)
      throw Error("train config: epochs, batch_size, learning_rate and max_seq_len must be positive");
  }

  EntityScope entity_scope() const {
    return strict_entities ? EntityScope::response_and_knowledge : EntityScope::response;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"warmup_steps", c.warmup_steps},
       {"max_seq_len", c.max_seq_len},
       {"seed", c.seed},
       {"kdial_mode", kdial_mode_name(c.kdial_mode)},
       {"clip_norm", c.clip_norm},
       {"strict_entities", c.strict_entities}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
  if (j.contains("kdial_mode")) c.kdial_mode = parse_kdial_mode(j.at("kdial_mode"));
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.strict_entities = j.value("strict_entities", c.strict_entities);
}

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
  std::vector<double> epoch_acc;   // stage-specific accuracy (entity argmax, label)
  std::size_t skipped = 0;         // samples without a loss, all epochs
  std::int64_t steps = 0;
};

/// What one training example contributed: its loss (absent when the
/// example is skipped) and hit/total counts for the accuracy column.
struct ExampleOutcome {
  std::optional<Tensor<float>> loss;
  std::size_t hits = 0;
  std::size_t total = 0;
};

using ExampleFn = std::function<ExampleOutcome(Tape<float>&, std::size_t)>;

/// Mini-batch Adam over `trainable`; the other tensors in `all` are frozen
/// (requires_grad off) for the duration and restored afterwards.
///
/// The batch loss is the mean of per-example losses. Learning rate warms up
/// linearly over warmup_steps and then stays constant. One log line per
/// epoch: stage, epoch, split, loss, accuracy.
inline TrainResult minibatch_adam(std::vector<Tensor<float>> all, std::vector<Tensor<float>> trainable,
                                  std::size_t n_examples, const TrainConfig& cfg, const ExampleFn& fn,
                                  const std::string& stage, const std::string& acc_name,
                                  std::ostream* log = nullptr) {
  cfg.validate();
  if (n_examples == 0) throw Error(stage + ": empty training split");
  if (trainable.empty()) throw Error(stage + ": nothing to train");

  std::vector<bool> saved;
  for (auto& t : all) {
    saved.push_back(t.requires_grad());
    t.set_requires_grad(false);
  }
  for (auto& t : trainable) t.set_requires_grad(true);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t(0));
  AdamState<float> adam;
  adam.lr = cfg.learning_rate;
  TrainResult res;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t loss_n = 0, hits = 0, total = 0, skipped = 0;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(cfg.batch_size)) {
      for (auto& t : trainable) t.zero_grad();
      std::size_t used = 0;
      const std::size_t e = std::min(order.size(), b + std::size_t(cfg.batch_size));
      for (std::size_t k = b; k < e; ++k) {
        Tape<float> tape;
        auto out = fn(tape, order[k]);
        hits += out.hits;
        total += out.total;
        if (!out.loss) {
          ++skipped;
          continue;
        }
        const double v = out.loss->item();
        if (!std::isfinite(v))
          throw NumericError(stage + ": non-finite loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(res.steps + 1));
        loss_sum += v;
        ++loss_n;
        ++used;
        tape.backward(*out.loss);
      }
      if (used == 0) continue;
      const float s = 1.0f / float(used);
      for (auto& t : trainable)
        for (auto& g : t.mutable_grad()) g *= s;
      if (cfg.clip_norm > 0) clip_grad_norm(std::span<Tensor<float>>(trainable), cfg.clip_norm);
      ++res.steps;
      const double warm =
          cfg.warmup_steps > 0 ? std::min(1.0, double(res.steps) / cfg.warmup_steps) : 1.0;
      adam.lr = cfg.learning_rate * warm;
      adam_step(std::span<Tensor<float>>(trainable), adam);
    }
    for (auto& t : trainable) t.zero_grad();
    const double mean = loss_n ? loss_sum / double(loss_n) : 0.0;
    const double acc = total ? double(hits) / double(total) : 0.0;
    res.epoch_loss.push_back(mean);
    res.epoch_acc.push_back(acc);
    res.skipped += skipped;
    std::ostringstream line;
    line << "stage=" << stage << " epoch=" << epoch << " split=train loss=" << std::fixed
         << std::setprecision(6) << mean << " " << acc_name << "=" << std::setprecision(4) << acc
         << " skipped=" << skipped;
    if (log) *log << line.str() << '\n';
    log::debug(line.str());
  }
  for (std::size_t i = 0; i < all.size(); ++i) all[i].set_requires_grad(saved[i]);
  return res;
}

}  // namespace fdl

#endif  // FDL_TRAIN_HPP
