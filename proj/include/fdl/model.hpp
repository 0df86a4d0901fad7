#ifndef FDL_MODEL_HPP
#define FDL_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fdl/autodiff.hpp"
#include "fdl/error.hpp"
#include "fdl/tensor.hpp"

namespace fdl {

enum class Activation { gelu, relu };

inline const char* activation_name(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

// Segment ids fed to the token-type embedding.
enum TokenType : int { kKnowledgeType = 0, kUserType = 1, kBotType = 2, kPadType = 3 };

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 0;                      // 0 -> 4 * d_model
  int d_ext = 0;                     // 0 -> d_ff
  std::vector<int> extended_layers;  // empty -> top 3 layers
  int max_seq_len = 64;
  int n_token_types = 4;
  Activation activation = Activation::gelu;
  bool causal = true;  // false gives a bidirectional encoder

  /// Fills derived defaults and validates. Idempotent.
  ModelConfig resolved() const {
    ModelConfig c = *this;
    if (c.d_ff == 0) c.d_ff = 4 * c.d_model;
    if (c.d_ext == 0) c.d_ext = c.d_ff;
    if (c.extended_layers.empty()) {
      for (int l = std::max(0, c.n_layers - 3); l < c.n_layers; ++l) c.extended_layers.push_back(l);
    }
    c.validate();
    return c;
  }

  void validate() const {
    if (vocab_size <= 0) throw Error("model config: vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0 || n_token_types <= 0)
      throw Error("model config: sizes must be positive");
    if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
    if (d_ff <= 0 || d_ext <= 0) throw Error("model config: d_ff and d_ext must be positive");
    for (int l : extended_layers)
      if (l < 0 || l >= n_layers)
        throw Error("model config: extended layer " + std::to_string(l) + " out of range");
  }

  int d_head() const { return d_model / n_heads; }
};

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_offset;
  std::vector<Tensor<T>> query, key, value;  // per head, [d_model x d_head]
  Tensor<T> attn_out;                        // [d_model x d_model]
  Tensor<T> ln2_gain, ln2_offset;
  Tensor<T> ffn_keys;    // [d_ff x d_model]
  Tensor<T> ffn_values;  // [d_model x d_ff]
};

template <typename T>
struct ModelParams {
  Tensor<T> token_embedding;     // [vocab x d_model], also the output projection
  Tensor<T> position_embedding;  // [max_seq_len x d_model]
  Tensor<T> type_embedding;      // [n_token_types x d_model]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain, final_offset;
};

/// Extra key-value slots for one layer's FFN.
template <typename T>
struct ExtensionSlots {
  int layer = 0;
  Tensor<T> keys;    // [d_ext x d_model]
  Tensor<T> values;  // [d_model x d_ext]
};

template <typename T>
struct ExtensionParams {
  std::vector<ExtensionSlots<T>> layers;

  const ExtensionSlots<T>* find(int layer) const {
    for (const auto& s : layers)
      if (s.layer == layer) return &s;
    return nullptr;
  }
};

template <typename T>
struct Model {
  ModelConfig config;
  ModelParams<T> params;
  std::optional<ExtensionParams<T>> extension;
};


template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> base_tensors(const Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  const auto& p = m.params;
  out.emplace_back("token_embedding", p.token_embedding);
  out.emplace_back("position_embedding", p.position_embedding);
  out.emplace_back("type_embedding", p.type_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1.gain", L.ln1_gain);
    out.emplace_back(pre + "ln1.offset", L.ln1_offset);
    for (std::size_t h = 0; h < L.query.size(); ++h) {
      out.emplace_back(pre + "attn.query" + std::to_string(h), L.query[h]);
      out.emplace_back(pre + "attn.key" + std::to_string(h), L.key[h]);
      out.emplace_back(pre + "attn.value" + std::to_string(h), L.value[h]);
    }
    out.emplace_back(pre + "attn.out", L.attn_out);
    out.emplace_back(pre + "ln2.gain", L.ln2_gain);
    out.emplace_back(pre + "ln2.offset", L.ln2_offset);
    out.emplace_back(pre + "ffn.keys", L.ffn_keys);
    out.emplace_back(pre + "ffn.values", L.ffn_values);
  }
  out.emplace_back("final.gain", p.final_gain);
  out.emplace_back("final.offset", p.final_offset);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> extension_tensors(const Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  if (!m.extension) return out;
  for (const auto& s : m.extension->layers) {
    const std::string pre = "ext.layer" + std::to_string(s.layer) + ".";
    out.emplace_back(pre + "keys", s.keys);
    out.emplace_back(pre + "values", s.values);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> all_tensors(const Model<T>& m) {
  auto out = base_tensors(m);
  auto ext = extension_tensors(m);
  out.insert(out.end(), ext.begin(), ext.end());
  return out;
}

template <typename T>
std::vector<Tensor<T>> tensors_only(const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  std::vector<Tensor<T>> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

/// FNV-1a over shapes and raw value bytes; equal hashes mean bit-identical
/// tensors for all practical purposes.
template <typename T>
std::uint64_t hash_tensors(const std::vector<Tensor<T>>& ts) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& t : ts) {
    for (auto d : t.shape()) mix(&d, sizeof(d));
    mix(t.data().data(), t.size() * sizeof(T));
  }
  return h;
}

namespace detail {

template <typename T>
Tensor<T> gaussian(std::mt19937_64& rng, Shape shape, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace detail

template <typename T>
ModelParams<T> init_params(const ModelConfig& raw, std::uint64_t seed, double sigma = 0.02) {
  const ModelConfig c = raw.resolved();
  std::mt19937_64 rng(seed);
  const auto dm = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  ModelParams<T> p;
  p.token_embedding = detail::gaussian<T>(rng, {std::size_t(c.vocab_size), dm}, sigma);
  p.position_embedding = detail::gaussian<T>(rng, {std::size_t(c.max_seq_len), dm}, sigma);
  p.type_embedding = detail::gaussian<T>(rng, {std::size_t(c.n_token_types), dm}, sigma);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerParams<T> L;
    L.ln1_gain = Tensor<T>::filled({dm}, T(1), true);
    L.ln1_offset = Tensor<T>::zeros({dm}, true);
    for (int h = 0; h < c.n_heads; ++h) {
      L.query.push_back(detail::gaussian<T>(rng, {dm, dh}, sigma));
      L.key.push_back(detail::gaussian<T>(rng, {dm, dh}, sigma));
      L.value.push_back(detail::gaussian<T>(rng, {dm, dh}, sigma));
    }
    L.attn_out = detail::gaussian<T>(rng, {dm, dm}, sigma);
    L.ln2_gain = Tensor<T>::filled({dm}, T(1), true);
    L.ln2_offset = Tensor<T>::zeros({dm}, true);
    L.ffn_keys = detail::gaussian<T>(rng, {std::size_t(c.d_ff), dm}, sigma);
    L.ffn_values = detail::gaussian<T>(rng, {dm, std::size_t(c.d_ff)}, sigma);
    p.layers.push_back(std::move(L));
  }
  p.final_gain = Tensor<T>::filled({dm}, T(1), true);
  p.final_offset = Tensor<T>::zeros({dm}, true);
  return p;
}

/// Gaussian weights (sigma 0.02), unit layer-norm gains, zero offsets.
/// Deterministic per (config, seed).
template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  Model<T> m;
  m.config = config.resolved();
  m.params = init_params<T>(m.config, seed);
  return m;
}

/// Adds zero-valued extension slots to the configured layers. Keys are
/// Gaussian, values are zero, so the model's outputs are unchanged.
template <typename T>
void attach_extension(Model<T>& m, std::uint64_t seed) {
  if (m.extension) throw PreconditionError("attach_extension: extension already attached");
  if (m.config.extended_layers.empty())
    throw PreconditionError("attach_extension: no extended layers configured");
  std::mt19937_64 rng(seed ^ 0x6b2d1a1f3e5c7d9bULL);
  const auto dm = static_cast<std::size_t>(m.config.d_model);
  const auto de = static_cast<std::size_t>(m.config.d_ext);
  ExtensionParams<T> ext;
  for (int l : m.config.extended_layers) {
    ExtensionSlots<T> s;
    s.layer = l;
    s.keys = detail::gaussian<T>(rng, {de, dm}, 0.02);
    s.values = Tensor<T>::zeros({dm, de}, true);
    ext.layers.push_back(std::move(s));
  }
  m.extension = std::move(ext);
}

/// Deep copy with independent storage.
template <typename T>
Model<T> clone_model(const Model<T>& src) {
  Model<T> m;
  m.config = src.config;
  const auto& p = src.params;
  auto& q = m.params;
  q.token_embedding = p.token_embedding.clone();
  q.position_embedding = p.position_embedding.clone();
  q.type_embedding = p.type_embedding.clone();
  for (const auto& L : p.layers) {
    LayerParams<T> N;
    N.ln1_gain = L.ln1_gain.clone();
    N.ln1_offset = L.ln1_offset.clone();
    for (const auto& t : L.query) N.query.push_back(t.clone());
    for (const auto& t : L.key) N.key.push_back(t.clone());
    for (const auto& t : L.value) N.value.push_back(t.clone());
    N.attn_out = L.attn_out.clone();
    N.ln2_gain = L.ln2_gain.clone();
    N.ln2_offset = L.ln2_offset.clone();
    N.ffn_keys = L.ffn_keys.clone();
    N.ffn_values = L.ffn_values.clone();
    q.layers.push_back(std::move(N));
  }
  q.final_gain = p.final_gain.clone();
  q.final_offset = p.final_offset.clone();
  if (src.extension) {
    ExtensionParams<T> e;
    for (const auto& s : src.extension->layers) e.layers.push_back({s.layer, s.keys.clone(), s.values.clone()});
    m.extension = std::move(e);
  }
  return m;
}

template <typename T>
void set_requires_grad(const std::vector<std::pair<std::string, Tensor<T>>>& named, bool v) {
  for (auto [_, t] : named) t.set_requires_grad(v);
}

template <typename T>
Tensor<T> activate(Tape<T>& tape, const Tensor<T>& x, Activation act) {
  return act == Activation::gelu ? ops::gelu(tape, x) : ops::relu(tape, x);
}

/// Key-value memory FFN, values * Act(keys * h), applied to each row of h.
/// h: [n x d_model], keys: [d x d_model], values: [d_model x d].
template <typename T>
Tensor<T> ffn_forward(Tape<T>& tape, const Tensor<T>& h, const Tensor<T>& keys,
                      const Tensor<T>& values, Activation act) {
  auto coeff = activate(tape, ops::matmul(tape, h, keys, true), act);
  return ops::matmul(tape, coeff, values, true);
}

/// Base FFN with extra slots. Concatenating slot banks is the same as
/// summing the two banks' outputs.
template <typename T>
Tensor<T> ffn_extended_forward(Tape<T>& tape, const Tensor<T>& h, const Tensor<T>& keys,
                               const Tensor<T>& values, const Tensor<T>& ext_keys,
                               const Tensor<T>& ext_values, Activation act) {
  auto base = ffn_forward(tape, h, keys, values, act);
  auto ext = ffn_forward(tape, h, ext_keys, ext_values, act);
  return ops::add(tape, base, ext);
}

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;  // [n x vocab]; undefined when not requested
  Tensor<T> hidden;  // final-normalized hidden states, [n x d_model]
};

// Called with (layer, normalized FFN input) during forward.
template <typename T>
using FfnProbe = std::function<void(int, const Tensor<T>&)>;

/// Pre-norm transformer over one sequence. Embedding = token + position +
/// token type; output logits use the tied token embedding.
template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const Model<T>& m, std::span<const int> ids,
                         std::span<const int> types, bool with_logits = true,
                         const FfnProbe<T>* probe = nullptr) {
  const auto& c = m.config;
  const auto& p = m.params;
  const std::size_t n = ids.size();
  if (n == 0) throw ShapeError("forward: empty input");
  if (types.size() != n) throw ShapeError("forward: token_type_ids length differs from token_ids");
  if (n > static_cast<std::size_t>(c.max_seq_len))
    throw ShapeError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);

  auto x = ops::add(tape, ops::embedding_lookup(tape, p.token_embedding, ids),
                    ops::embedding_lookup(tape, p.position_embedding, std::span<const int>(pos)));
  x = ops::add(tape, x, ops::embedding_lookup(tape, p.type_embedding, types));

  const T attn_scale = T(1) / std::sqrt(T(c.d_head()));
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& L = p.layers[static_cast<std::size_t>(l)];
    auto a = ops::layer_norm(tape, x, L.ln1_gain, L.ln1_offset);
    std::vector<Tensor<T>> heads;
    heads.reserve(L.query.size());
    for (std::size_t h = 0; h < L.query.size(); ++h) {
      auto q = ops::matmul(tape, a, L.query[h]);
      auto k = ops::matmul(tape, a, L.key[h]);
      auto v = ops::matmul(tape, a, L.value[h]);
      auto scores = ops::scale(tape, ops::matmul(tape, q, k, true), attn_scale);
      auto attn = ops::softmax(tape, scores, c.causal);
      heads.push_back(ops::matmul(tape, attn, v));
    }
    auto merged = ops::concat(tape, std::span<const Tensor<T>>(heads), 1);
    x = ops::add(tape, x, ops::matmul(tape, merged, L.attn_out));

    auto b = ops::layer_norm(tape, x, L.ln2_gain, L.ln2_offset);
    if (probe && *probe) (*probe)(l, b);
    const ExtensionSlots<T>* ext = m.extension ? m.extension->find(l) : nullptr;
    auto f = ext ? ffn_extended_forward(tape, b, L.ffn_keys, L.ffn_values, ext->keys, ext->values,
                                        c.activation)
                 : ffn_forward(tape, b, L.ffn_keys, L.ffn_values, c.activation);
    x = ops::add(tape, x, f);
  }
  ForwardOutput<T> out;
  out.hidden = ops::layer_norm(tape, x, p.final_gain, p.final_offset);
  if (with_logits) out.logits = ops::matmul(tape, out.hidden, p.token_embedding, true);
  return out;
}

struct SlotActivation {
  std::string bank;  // "base" or "ext"
  int slot = 0;
  double coefficient = 0;
};

/// Largest post-activation memory coefficients of one layer's FFN at the
/// last input position. Extension slots, when present, are ranked together
/// with the base slots. Read-only.
template <typename T>
std::vector<SlotActivation> ffn_key_activations(const Model<T>& m, int layer,
                                                std::span<const int> ids,
                                                std::span<const int> types, std::size_t k) {
  if (layer < 0 || layer >= m.config.n_layers)
    throw Error("ffn_key_activations: layer " + std::to_string(layer) + " out of range");
  Tensor<T> captured;
  FfnProbe<T> probe = [&](int l, const Tensor<T>& b) {
    if (l == layer) captured = b;
  };
  Tape<T> tape(false);
  forward(tape, m, ids, types, false, &probe);
  const std::size_t dm = captured.cols();
  const std::size_t last = captured.rows() - 1;
  std::vector<T> h(captured.data().begin() + last * dm, captured.data().begin() + (last + 1) * dm);

  std::vector<SlotActivation> all;
  auto score_bank = [&](const Tensor<T>& keys, const char* bank) {
    for (std::size_t s = 0; s < keys.rows(); ++s) {
      T dot = 0;
      for (std::size_t j = 0; j < dm; ++j) dot += keys.at(s, j) * h[j];
      const T a = m.config.activation == Activation::gelu ? ops::gelu_value(dot)
                                                         : (dot > T(0) ? dot : T(0));
      all.push_back({bank, static_cast<int>(s), static_cast<double>(a)});
    }
  };
  const auto& L = m.params.layers[static_cast<std::size_t>(layer)];
  score_bank(L.ffn_keys, "base");
  if (m.extension)
    if (const auto* ext = m.extension->find(layer)) score_bank(ext->keys, "ext");
  std::stable_sort(all.begin(), all.end(), [](const SlotActivation& a, const SlotActivation& b) {
    return a.coefficient > b.coefficient;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace fdl

#endif  // FDL_MODEL_HPP
