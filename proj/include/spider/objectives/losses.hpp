#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spider/core/error.hpp"
#include "spider/numerics/parameters.hpp"
#include "spider/numerics/tensor.hpp"
#include "spider/text/corruption.hpp"
#include "spider/text/sequence.hpp"

namespace spider::objectives {

// Task heads on top of the encoder. The MLM decoder reuses embed.token as its
// output projection and only owns a bias.
struct HeadConfig {
  std::size_t hidden = 0;
  std::size_t vocab_size = 0;
  std::size_t max_order_classes = 20;  // K'_max
  double init_std = 0.02;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& pretraining_head_prefixes() {
  static const std::vector<std::string> p{"head.mlm.", "head.nsp.", "head.uor."};
  return p;
}

template <typename T>
void init_head_parameters(nn::ParameterStore<T>& p, const HeadConfig& c) {
  auto affine = [&](const std::string& name, std::size_t out) {
    p.add_normal(name + ".weight", c.hidden, out, c.init_std, c.seed);
    p.add_constant(name + ".bias", 1, out, T(0));
  };
  p.add_constant("head.mlm.bias", 1, c.vocab_size, T(0));
  affine("head.nsp", 2);
  affine("head.uor", c.max_order_classes);
  affine("head.dm", 1);
}

// A loss value with the number of items that contributed to it.
template <typename T>
struct LossTerm {
  nn::Tensor<T> value = nn::Tensor<T>::scalar(T(0));
  std::size_t count = 0;
};

template <typename T>
nn::Tensor<T> affine_head(const nn::Tensor<T>& x, const nn::ParameterStore<T>& p, const std::string& name) {
  return nn::add(nn::matmul(x, p.get(name + ".weight")), p.get(name + ".bias"));
}

// Mean cross-entropy over masked positions against vocabulary logits
// H[pos] E^T + b.
template <typename T>
LossTerm<T> mlm_loss(const nn::Tensor<T>& hidden, const std::vector<text::MaskedPosition>& labels,
                     const nn::ParameterStore<T>& p) {
  if (labels.empty()) return {};
  const auto& embedding = p.get("embed.token");
  std::vector<std::size_t> rows, targets;
  for (const auto& l : labels) {
    if (l.original >= embedding.rows()) {
      throw VocabularyError("MLM label id " + std::to_string(l.original) + " >= vocab size " +
                            std::to_string(embedding.rows()));
    }
    rows.push_back(l.position);
    targets.push_back(l.original);
  }
  const auto logits = nn::add(nn::matmul_nt(nn::gather_rows(hidden, rows), embedding), p.get("head.mlm.bias"));
  const T n = static_cast<T>(labels.size());
  return {nn::scale(nn::cross_entropy_rows(logits, targets), T(1) / n), labels.size()};
}

template <typename T>
LossTerm<T> nsp_loss(const nn::Tensor<T>& pooled, int label, const nn::ParameterStore<T>& p) {
  if (label != 0 && label != 1) throw InvalidArgument("NSP label must be 0 or 1");
  return {nn::softmax_cross_entropy(affine_head(pooled, p, "head.nsp"), static_cast<std::size_t>(label)), 1};
}

// Sum over the K' permuted slots of the cross-entropy between the slot's
// logits (restricted to the first K' classes) and its original index.
// `reps` holds one row per permuted slot, in surface order.
template <typename T>
LossTerm<T> uor_loss(const nn::Tensor<T>& reps, const std::vector<std::size_t>& order_labels,
                     const nn::ParameterStore<T>& p) {
  const std::size_t kp = order_labels.size();
  if (kp < 2) return {};
  if (reps.rows() != kp) {
    throw ShapeError("uor_loss: " + std::to_string(reps.rows()) + " representations for " + std::to_string(kp) +
                     " labels");
  }
  std::vector<bool> seen(kp, false);
  for (std::size_t o : order_labels) {
    if (o >= kp) throw ContractViolation("order label " + std::to_string(o) + " outside [0, K')");
    if (seen[o]) throw ContractViolation("duplicate order label " + std::to_string(o));
    seen[o] = true;
  }
  auto logits = affine_head(reps, p, "head.uor");
  if (kp > logits.cols()) {
    throw ContractViolation("K' = " + std::to_string(kp) + " exceeds the order head's " +
                            std::to_string(logits.cols()) + " classes");
  }
  if (kp < logits.cols()) logits = nn::slice_cols(logits, 0, kp);
  return {nn::cross_entropy_rows(logits, order_labels), kp};
}

// Per-slot argmax accuracy of the order head (restricted to K' classes).
template <typename T>
std::size_t uor_correct(const nn::Tensor<T>& reps, const std::vector<std::size_t>& order_labels,
                        const nn::ParameterStore<T>& p) {
  const std::size_t kp = order_labels.size();
  if (kp < 2) return 0;
  nn::NoGradGuard guard;
  const auto logits = affine_head(reps, p, "head.uor");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < kp; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < kp; ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    correct += best == order_labels[r];
  }
  return correct;
}

// Sum over triplets of 1 - cos(h_s + h_v, h_o). Indexes must fall on real
// (unpadded) positions.
template <typename T>
LossTerm<T> sbr_loss(const nn::Tensor<T>& hidden, const std::vector<text::TripletPositions>& triplets,
                     const std::vector<std::uint8_t>& attention_mask) {
  if (triplets.empty()) return {};
  std::vector<nn::Tensor<T>> terms;
  for (const auto& t : triplets) {
    for (std::size_t i : {t.subject, t.verb, t.object}) {
      if (i >= hidden.rows() || i >= attention_mask.size() || !attention_mask[i]) {
        throw ContractViolation("triplet index " + std::to_string(i) + " points into padding");
      }
    }
    const auto sv = nn::add(nn::slice_rows(hidden, t.subject, t.subject + 1), nn::slice_rows(hidden, t.verb, t.verb + 1));
    const auto cos = nn::cosine_similarity(sv, nn::slice_rows(hidden, t.object, t.object + 1));
    terms.push_back(nn::sub(nn::Tensor<T>::scalar(T(1)), cos));
  }
  return {nn::add_scalars(terms), triplets.size()};
}

// Mean cos(h_s + h_v, h_o) over the triplets, without gradients.
template <typename T>
double mean_backbone_cosine(const nn::Tensor<T>& hidden, const std::vector<text::TripletPositions>& triplets,
                            const std::vector<std::uint8_t>& attention_mask) {
  if (triplets.empty()) return 0.0;
  nn::NoGradGuard guard;
  const auto loss = sbr_loss(hidden, triplets, attention_mask);
  return 1.0 - static_cast<double>(loss.value.item()) / static_cast<double>(triplets.size());
}

// g = sigmoid(w . pooled + b).
template <typename T>
nn::Tensor<T> matching_probability(const nn::Tensor<T>& pooled, const nn::ParameterStore<T>& p) {
  return nn::sigmoid(affine_head(pooled, p, "head.dm"));
}

template <typename T>
nn::Tensor<T> matching_logit(const nn::Tensor<T>& pooled, const nn::ParameterStore<T>& p) {
  return affine_head(pooled, p, "head.dm");
}

template <typename T>
LossTerm<T> dm_loss_binary(const nn::Tensor<T>& probability, int label) {
  return {nn::binary_cross_entropy(probability, label), 1};
}

// Softmax cross-entropy over a 1 x C row of candidate scores.
template <typename T>
LossTerm<T> dm_loss_multichoice(const nn::Tensor<T>& scores, std::size_t correct) {
  if (scores.rows() != 1) throw ShapeError("dm_loss_multichoice expects a 1 x C score row");
  if (scores.cols() < 2) throw InvalidArgument("multiple-choice loss needs C >= 2, got " + std::to_string(scores.cols()));
  if (correct >= scores.cols()) throw InvalidArgument("correct index out of range");
  return {nn::softmax_cross_entropy(scores, correct), 1};
}

// ---------------------------------------------------------------------------
// Composite losses

struct LossWeights {
  double lambda1 = 1, lambda2 = 1, lambda3 = 1;
  double beta1 = 1, beta2 = 1, beta3 = 1;

  void validate() const {
    for (double w : {lambda1, lambda2, lambda3, beta1, beta2, beta3})
      if (!std::isfinite(w) || w < 0) throw ConfigError("loss weights must be finite and non-negative");
  }
};

struct LossBreakdown {
  double mlm = 0, nsp = 0, uor = 0, sbr = 0, dm = 0;
  double total = 0;
  std::size_t mlm_count = 0, nsp_count = 0, uor_count = 0, sbr_count = 0, dm_count = 0;

  void accumulate(const LossBreakdown& o) {
    mlm += o.mlm, nsp += o.nsp, uor += o.uor, sbr += o.sbr, dm += o.dm;
    mlm_count += o.mlm_count, nsp_count += o.nsp_count, uor_count += o.uor_count;
    sbr_count += o.sbr_count, dm_count += o.dm_count;
  }
};

// total = l1 (mlm + nsp) + l2 uor + l3 sbr
inline LossBreakdown dap_loss(LossBreakdown c, const LossWeights& w) {
  c.dm = 0;
  c.dm_count = 0;
  c.total = w.lambda1 * (c.mlm + c.nsp) + w.lambda2 * c.uor + w.lambda3 * c.sbr;
  return c;
}

// total = b1 dm + b2 uor + b3 sbr
inline LossBreakdown mtf_loss(LossBreakdown c, const LossWeights& w) {
  c.mlm = c.nsp = 0;
  c.mlm_count = c.nsp_count = 0;
  c.total = w.beta1 * c.dm + w.beta2 * c.uor + w.beta3 * c.sbr;
  return c;
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"mlm", b.mlm},
          {"nsp", b.nsp},
          {"uor", b.uor},
          {"sbr", b.sbr},
          {"dm", b.dm},
          {"total", b.total},
          {"counts", {{"mlm", b.mlm_count}, {"nsp", b.nsp_count}, {"uor", b.uor_count}, {"sbr", b.sbr_count},
                      {"dm", b.dm_count}}}};
}

inline LossBreakdown loss_breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.mlm = j.at("mlm").get<double>();
  b.nsp = j.at("nsp").get<double>();
  b.uor = j.at("uor").get<double>();
  b.sbr = j.at("sbr").get<double>();
  b.dm = j.at("dm").get<double>();
  b.total = j.at("total").get<double>();
  const auto& c = j.at("counts");
  b.mlm_count = c.at("mlm").get<std::size_t>();
  b.nsp_count = c.at("nsp").get<std::size_t>();
  b.uor_count = c.at("uor").get<std::size_t>();
  b.sbr_count = c.at("sbr").get<std::size_t>();
  b.dm_count = c.at("dm").get<std::size_t>();
  return b;
}

// Differentiable weighted sum. Terms with weight 0 are left out of the graph
// entirely, so a disabled objective cannot perturb the remaining gradients.
template <typename T>
nn::Tensor<T> weighted_total(const std::vector<std::pair<double, nn::Tensor<T>>>& terms) {
  std::vector<nn::Tensor<T>> parts;
  for (const auto& [w, t] : terms) {
    if (w == 0.0) continue;
    parts.push_back(w == 1.0 ? t : nn::scale(t, static_cast<T>(w)));
  }
  return nn::add_scalars(parts);
}

}  // namespace spider::objectives
