#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/core/random.hpp"
#include "spider/numerics/parameters.hpp"
#include "spider/numerics/tensor.hpp"
#include "spider/text/sequence.hpp"

namespace spider::encoder {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_position = 128;
  double dropout = 0.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return hidden / heads; }

  void validate(std::size_t max_len = 0) const {
    if (vocab_size <= text::special::kCount) throw ConfigError("encoder vocab_size must exceed the reserved block");
    if (hidden == 0 || heads == 0 || layers == 0 || ffn == 0) throw ConfigError("encoder dimensions must be positive");
    if (hidden % heads != 0) {
      throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                        " heads");
    }
    if (max_len > max_position) {
      throw ConfigError("max_position " + std::to_string(max_position) + " is below max_len " + std::to_string(max_len));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"hidden", c.hidden},   {"layers", c.layers},
          {"heads", c.heads},           {"ffn", c.ffn},         {"max_position", c.max_position},
          {"dropout", c.dropout},       {"init_std", c.init_std}, {"seed", c.seed}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.max_position = j.at("max_position").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.init_std = j.at("init_std").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i) + "."; }

// Registers every encoder parameter (embeddings, layer stack, pooler) with
// normal(0, init_std) weights, zero biases and unit layer-norm gains.
template <typename T>
void init_encoder_parameters(nn::ParameterStore<T>& params, const EncoderConfig& c) {
  c.validate();
  const std::size_t d = c.hidden;
  auto weight = [&](const std::string& name, std::size_t r, std::size_t k) {
    params.add_normal(name, r, k, c.init_std, c.seed);
  };
  auto zeros = [&](const std::string& name, std::size_t k) { params.add_constant(name, 1, k, T(0)); };
  auto norm = [&](const std::string& prefix) {
    params.add_constant(prefix + "gain", 1, d, T(1));
    zeros(prefix + "bias", d);
  };
  weight("embed.token", c.vocab_size, d);
  weight("embed.position", c.max_position, d);
  weight("embed.segment", 2, d);
  norm("embed.ln.");
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* proj : {"query", "key", "value", "output"}) {
      weight(p + "attn." + proj + ".weight", d, d);
      zeros(p + "attn." + proj + ".bias", d);
    }
    norm(p + "attn.ln.");
    weight(p + "ffn.in.weight", d, c.ffn);
    zeros(p + "ffn.in.bias", c.ffn);
    weight(p + "ffn.out.weight", c.ffn, d);
    zeros(p + "ffn.out.bias", d);
    norm(p + "ffn.ln.");
  }
  weight("pooler.weight", d, d);
  zeros("pooler.bias", d);
}

// Attention probabilities per layer and head, recorded on request.
template <typename T>
struct EncodeTrace {
  std::vector<std::vector<nn::Tensor<T>>> attention;
};

struct EncodeOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

namespace detail {

template <typename T>
nn::Tensor<T> linear(const nn::Tensor<T>& x, const nn::ParameterStore<T>& p, const std::string& name) {
  return nn::add(nn::matmul(x, p.get(name + ".weight")), p.get(name + ".bias"));
}

template <typename T>
nn::Tensor<T> norm(const nn::Tensor<T>& x, const nn::ParameterStore<T>& p, const std::string& prefix) {
  return nn::layer_norm(x, p.get(prefix + "gain"), p.get(prefix + "bias"));
}

template <typename T>
nn::Tensor<T> maybe_dropout(const nn::Tensor<T>& x, double rate, bool train, Rng& rng) {
  if (!train || rate <= 0.0) return x;
  std::vector<std::uint8_t> keep(x.size());
  for (auto& k : keep) k = uniform_unit(rng) >= rate;
  return nn::dropout(x, static_cast<T>(rate), keep);
}

}  // namespace detail

// Multi-layer bidirectional encoder (post-LN):
//   a = LN(x + MultiHead(x, x, x)),  h = LN(a + W2 gelu(W1 a + b1) + b2).
// Padding keys receive a large negative additive mask, so padded positions
// never influence real ones. Returns H with shape (n, hidden).
template <typename T>
nn::Tensor<T> encode(const text::InputSequence& seq, const nn::ParameterStore<T>& params, const EncoderConfig& c,
                     const EncodeOptions& options = {}, EncodeTrace<T>* trace = nullptr) {
  const std::size_t n = seq.ids.size();
  if (n == 0) throw InvalidArgument("encode: empty sequence");
  if (n > c.max_position) {
    throw CapacityError("sequence length " + std::to_string(n) + " exceeds max_position " +
                        std::to_string(c.max_position));
  }
  std::vector<std::size_t> ids(n), positions(n), segments(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.ids[i] >= c.vocab_size) {
      throw VocabularyError("token id " + std::to_string(seq.ids[i]) + " >= vocab size " + std::to_string(c.vocab_size));
    }
    ids[i] = seq.ids[i];
    positions[i] = i;
    segments[i] = seq.segment_ids[i];
  }
  Rng rng = make_rng(options.dropout_seed, {0x64726f70ULL});

  nn::Tensor<T> x = nn::add(nn::add(nn::gather_rows(params.get("embed.token"), ids),
                                    nn::gather_rows(params.get("embed.position"), positions)),
                            nn::gather_rows(params.get("embed.segment"), segments));
  x = detail::maybe_dropout(detail::norm(x, params, "embed.ln."), c.dropout, options.train, rng);

  std::vector<T> mask_values(n);
  for (std::size_t i = 0; i < n; ++i) mask_values[i] = seq.attention_mask[i] ? T(0) : T(-1e9);
  const nn::Tensor<T> mask = nn::Tensor<T>::row(std::move(mask_values));
  const std::size_t dh = c.head_dim();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  if (trace) trace->attention.clear();
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = layer_prefix(l);
    const auto q = detail::linear(x, params, p + "attn.query");
    const auto k = detail::linear(x, params, p + "attn.key");
    const auto v = detail::linear(x, params, p + "attn.value");
    std::vector<nn::Tensor<T>> heads;
    if (trace) trace->attention.emplace_back();
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto qh = nn::slice_cols(q, h * dh, (h + 1) * dh);
      const auto kh = nn::slice_cols(k, h * dh, (h + 1) * dh);
      const auto vh = nn::slice_cols(v, h * dh, (h + 1) * dh);
      const auto probs = nn::softmax_rows(nn::add(nn::scale(nn::matmul_nt(qh, kh), inv_sqrt), mask));
      if (trace) trace->attention.back().push_back(probs);
      heads.push_back(nn::matmul(probs, vh));
    }
    const auto context = c.heads == 1 ? heads[0] : nn::concat_cols(heads);
    auto attn = detail::maybe_dropout(detail::linear(context, params, p + "attn.output"), c.dropout, options.train, rng);
    const auto a = detail::norm(nn::add(x, attn), params, p + "attn.ln.");
    auto ff = detail::linear(nn::gelu(detail::linear(a, params, p + "ffn.in")), params, p + "ffn.out");
    ff = detail::maybe_dropout(ff, c.dropout, options.train, rng);
    x = detail::norm(nn::add(a, ff), params, p + "ffn.ln.");
  }
  return x;
}

// Rows of H at the [EOU] positions, in surface order.
template <typename T>
nn::Tensor<T> utterance_representations(const nn::Tensor<T>& hidden, const std::vector<std::size_t>& eou_positions,
                                        const std::vector<text::TokenId>& ids) {
  if (eou_positions.empty()) throw ContractViolation("utterance_representations: no [EOU] positions");
  for (std::size_t p : eou_positions) {
    if (p >= hidden.rows() || p >= ids.size() || ids[p] != text::special::kEou) {
      throw ContractViolation("position " + std::to_string(p) + " does not hold an [EOU] token");
    }
  }
  return nn::gather_rows(hidden, eou_positions);
}

template <typename T>
nn::Tensor<T> utterance_representations(const nn::Tensor<T>& hidden, const text::InputSequence& seq) {
  return utterance_representations(hidden, seq.eou_positions, seq.ids);
}

// tanh(W h_[CLS] + b).
template <typename T>
nn::Tensor<T> pooled_representation(const nn::Tensor<T>& hidden, const nn::ParameterStore<T>& params) {
  if (hidden.rows() == 0) throw InvalidArgument("pooled_representation: empty hidden states");
  return nn::tanh(detail::linear(nn::slice_rows(hidden, 0, 1), params, "pooler"));
}

}  // namespace spider::encoder
