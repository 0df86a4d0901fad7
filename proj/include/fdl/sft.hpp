#ifndef FDL_SFT_HPP
#define FDL_SFT_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "fdl/autodiff.hpp"
#include "fdl/corpus.hpp"
#include "fdl/model.hpp"
#include "fdl/train.hpp"

namespace fdl {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Next-token view of one encoded sample: row i of the logits predicts
/// targets[i] = ids[i + 1], so the masks are shifted by one as well.
struct LmExample {
  std::vector<int> ids;
  std::vector<int> types;
  std::vector<int> targets;
  std::vector<std::uint8_t> response_mask;
  std::vector<std::uint8_t> entity_mask;
};

inline LmExample make_lm_example(const EncodedSample& e) {
  if (e.ids.size() < 2) throw Error("make_lm_example: sequence shorter than two tokens");
  const std::size_t n = e.ids.size() - 1;
  LmExample x;
  x.ids.assign(e.ids.begin(), e.ids.begin() + long(n));
  x.types.assign(e.types.begin(), e.types.begin() + long(n));
  x.targets.assign(e.ids.begin() + 1, e.ids.end());
  x.response_mask.assign(e.response_mask.begin() + 1, e.response_mask.end());
  x.entity_mask.assign(e.entity_mask.begin() + 1, e.entity_mask.end());
  return x;
}

inline std::vector<LmExample> encode_for_lm(const std::vector<DialogueSample>& samples,
                                            const Vocabulary& vocab, std::size_t max_len,
                                            EntityScope scope = EntityScope::response) {
  std::vector<LmExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_lm_example(encode_sample(s, vocab, max_len, scope)));
  return out;
}

namespace detail {

template <typename T>
Tensor<T> masked_nll(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask, std::size_t count) {
  std::vector<T> w(mask.size(), T(0));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) w[i] = T(1) / T(count);
  return ops::cross_entropy(tape, logits, targets, std::span<const T>(w));
}

inline std::size_t mask_count(std::span<const std::uint8_t> mask) {
  return std::size_t(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

}  // namespace detail

/// Mean negative log-likelihood over the m response positions.
template <typename T>
Tensor<T> loss_ce(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets,
                  std::span<const std::uint8_t> response_mask) {
  if (targets.size() != logits.rows() || response_mask.size() != logits.rows())
    throw ShapeError("loss_ce: targets and mask must have one entry per logits row");
  const std::size_t m = detail::mask_count(response_mask);
  if (m == 0) throw Error("loss_ce: empty response mask");
  return detail::masked_nll(tape, logits, targets, response_mask, m);
}

/// Mean negative log-likelihood over the n' entity positions. A sample
/// without entities has no loss; the caller skips it.
template <typename T>
std::optional<Tensor<T>> loss_kce(Tape<T>& tape, const Tensor<T>& logits,
                                  std::span<const int> targets,
                                  std::span<const std::uint8_t> entity_mask) {
  if (targets.size() != logits.rows() || entity_mask.size() != logits.rows())
    throw ShapeError("loss_kce: targets and mask must have one entry per logits row");
  const std::size_t n = detail::mask_count(entity_mask);
  if (n == 0) return std::nullopt;
  return detail::masked_nll(tape, logits, targets, entity_mask, n);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Tensors excluded from optimizer updates.
struct FreezeMask {
  std::unordered_set<const void*> frozen;

  template <typename T>
  void add(const std::vector<std::pair<std::string, Tensor<T>>>& named) {
    for (const auto& [name, t] : named) frozen.insert(t.id());
  }
  template <typename T>
  bool contains(const Tensor<T>& t) const {
    return frozen.count(t.id()) > 0;
  }
};

enum class LossKind { ce, kce };

using SampleLoss = std::function<std::optional<Tensor<float>>(Tape<float>&, const Tensor<float>&,
                                                              const LmExample&)>;

inline SampleLoss make_sample_loss(LossKind kind) {
  if (kind == LossKind::ce)
    return [](Tape<float>& tape, const Tensor<float>& logits, const LmExample& x) {
      return std::optional<Tensor<float>>(loss_ce(tape, logits, std::span<const int>(x.targets),
                                                  std::span<const std::uint8_t>(x.response_mask)));
    };
  return [](Tape<float>& tape, const Tensor<float>& logits, const LmExample& x) {
    return loss_kce(tape, logits, std::span<const int>(x.targets),
                    std::span<const std::uint8_t>(x.entity_mask));
  };
}

namespace detail {

// Correct / total argmax predictions at entity positions.
inline std::pair<std::size_t, std::size_t> entity_hits(const Tensor<float>& logits,
                                                       const LmExample& x) {
  std::size_t hit = 0, total = 0;
  const std::size_t v = logits.cols();
  for (std::size_t i = 0; i < x.entity_mask.size(); ++i) {
    if (!x.entity_mask[i]) continue;
    const float* row = logits.data().data() + i * v;
    const auto best = std::size_t(std::max_element(row, row + v) - row);
    hit += best == std::size_t(x.targets[i]);
    ++total;
  }
  return {hit, total};
}

}  // namespace detail

/// Trains `trainable` on next-token examples; every other model tensor is
/// frozen.
inline TrainResult run_training(Model<float>& model, std::vector<Tensor<float>> trainable,
                                const std::vector<LmExample>& data, const TrainConfig& cfg,
                                const SampleLoss& loss_fn, const std::string& stage,
                                std::ostream* log = nullptr) {
  ExampleFn fn = [&](Tape<float>& tape, std::size_t i) {
    const auto& x = data[i];
    auto out = forward(tape, model, std::span<const int>(x.ids), std::span<const int>(x.types));
    auto [h, t] = detail::entity_hits(out.logits, x);
    return ExampleOutcome{loss_fn(tape, out.logits, x), h, t};
  };
  return minibatch_adam(tensors_only(all_tensors(model)), std::move(trainable), data.size(), cfg, fn,
                        stage, "entity_acc", log);
}

/// Mean per-sample loss without updating anything.
inline double mean_loss(const Model<float>& model, const std::vector<LmExample>& data, LossKind kind) {
  if (data.empty()) throw Error("mean_loss: empty split");
  auto fn = make_sample_loss(kind);
  double sum = 0;
  std::size_t n = 0;
  for (const auto& x : data) {
    Tape<float> tape(false);
    auto out = forward(tape, model, std::span<const int>(x.ids), std::span<const int>(x.types));
    if (auto l = fn(tape, out.logits, x)) {
      sum += l->item();
      ++n;
    }
  }
  return n ? sum / double(n) : 0.0;
}

/// Teacher-forced argmax accuracy at entity positions.
inline double entity_accuracy(const Model<float>& model, const std::vector<LmExample>& data) {
  std::size_t hit = 0, total = 0;
  for (const auto& x : data) {
    Tape<float> tape(false);
    auto out = forward(tape, model, std::span<const int>(x.ids), std::span<const int>(x.types));
    auto [h, t] = detail::entity_hits(out.logits, x);
    hit += h;
    total += t;
  }
  return total ? double(hit) / double(total) : 0.0;
}

/// Dialogue fine-tuning of every model tensor with loss_ce.
inline TrainResult train_sft(Model<float>& model, const std::vector<LmExample>& data,
                             const TrainConfig& cfg, std::ostream* log = nullptr,
                             const std::string& stage = "sft") {
  return run_training(model, tensors_only(all_tensors(model)), data, cfg,
                      make_sample_loss(LossKind::ce), stage, log);
}

/// Tensors left trainable after applying `mask`.
inline std::vector<Tensor<float>> unfrozen(const Model<float>& model, const FreezeMask& mask) {
  std::vector<Tensor<float>> out;
  for (const auto& [n, t] : all_tensors(model))
    if (!mask.contains(t)) out.push_back(t);
  return out;
}

/// Stage 1: base frozen, extension slots trained with loss_kce (or loss_ce
/// over the whole response in the alpha variant).
inline TrainResult train_kdial_stage1(Model<float>& model, const std::vector<LmExample>& data,
                                      const TrainConfig& cfg, std::ostream* log = nullptr) {
  if (!model.extension) throw PreconditionError("kdial stage 1: no extension attached");
  FreezeMask mask;
  mask.add(base_tensors(model));
  const auto kind = cfg.kdial_mode == KDialMode::entity_only ? LossKind::kce : LossKind::ce;
  return run_training(model, unfrozen(model, mask), data, cfg, make_sample_loss(kind),
                      std::string("kdial1.") + kdial_mode_name(cfg.kdial_mode), log);
}

/// Stage 2: extension frozen, base re-fine-tuned with loss_ce.
inline TrainResult train_kdial_stage2(Model<float>& model, const std::vector<LmExample>& data,
                                      const TrainConfig& cfg, std::ostream* log = nullptr) {
  if (!model.extension) throw PreconditionError("kdial stage 2: no extension attached");
  FreezeMask mask;
  mask.add(extension_tensors(model));
  return run_training(model, unfrozen(model, mask), data, cfg, make_sample_loss(LossKind::ce),
                      "kdial2", log);
}

}  // namespace fdl

#endif  // FDL_SFT_HPP
