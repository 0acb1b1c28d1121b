#include "schedlab/objectives/losses.hpp"

#include <cmath>
#include <numeric>

#include "schedlab/util/error.hpp"
#include "schedlab/util/json_fields.hpp"

namespace schedlab::objectives {
namespace ops = ad::ops;
using nlohmann::json;

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
  if (!(kappa > 0.0)) throw InvalidArgument("kappa must be positive");
  if (!(diversity_weight >= 0.0)) throw InvalidArgument("diversity_weight must be nonnegative");
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"tau", c.tau}, {"kappa", c.kappa}, {"distractors", c.distractors}, {"diversity_weight", c.diversity_weight}};
}

void from_json(const json& j, LossConfig& c) {
  JsonFields(j, "loss")
      .opt("tau", c.tau)
      .opt("kappa", c.kappa)
      .opt("distractors", c.distractors)
      .opt("diversity_weight", c.diversity_weight)
      .finish();
  c.validate();
}

std::vector<std::uint8_t> duplicate_mask(std::span<const std::uint32_t> image_ids) {
  const std::size_t b = image_ids.size();
  std::vector<std::uint8_t> dup(b * b, 0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (i != j && image_ids[i] == image_ids[j]) dup[i * b + j] = 1;
  return dup;
}

template <typename T>
Tensor<T> loss_av(Tape<T>& tape, const Tensor<T>& audio, const Tensor<T>& image,
                  std::span<const std::uint8_t> duplicate, double tau) {
  if (audio.rank() != 2 || image.rank() != 2 || audio.shape() != image.shape())
    throw InvalidArgument("loss_av: audio and image embeddings must both be [B, e]");
  const std::size_t b = audio.dim(0), e = audio.dim(1);
  if (b == 0) throw InvalidArgument("loss_av: empty batch");
  if (!(tau > 0.0)) throw InvalidArgument("loss_av: tau must be positive");
  if (!duplicate.empty() && duplicate.size() != b * b) throw InvalidArgument("loss_av: duplicate mask must be [B, B]");
  for (const auto* t : {&audio, &image}) {
    auto v = t->values();
    for (std::size_t i = 0; i < b; ++i) {
      double n2 = 0;
      for (std::size_t k = 0; k < e; ++k) n2 += static_cast<double>(v[i * e + k]) * v[i * e + k];
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-4) throw InvalidArgument("loss_av: embeddings must be L2-normalized");
    }
  }
  std::vector<std::uint8_t> keep_ai(b * b, 1), keep_ia(b * b, 1);
  if (!duplicate.empty()) {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        keep_ai[i * b + j] = duplicate[i * b + j] ? 0 : 1;
        keep_ia[j * b + i] = duplicate[i * b + j] ? 0 : 1;
      }
  }
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  auto s = ops::scale(tape, ops::matmul(tape, audio, ops::transpose(tape, image)), static_cast<T>(1.0 / tau));
  auto a2i = ops::cross_entropy_rows(tape, s, diag, keep_ai);
  auto i2a = ops::cross_entropy_rows(tape, ops::transpose(tape, s), diag, keep_ia);
  return ops::scale(tape, ops::add(tape, a2i, i2a), T(0.5));
}

DistractorPlan sample_distractors(std::span<const std::size_t> masked, std::size_t length, std::size_t k,
                                  Rng& rng) {
  if (masked.empty()) throw InvalidArgument("distractors: empty masked set");
  for (auto m : masked)
    if (m >= length) throw InvalidArgument("distractors: masked position out of range");
  const std::size_t n = masked.size();
  const std::size_t pool_size = n >= 2 ? n - 1 : length - 1;
  DistractorPlan plan;
  plan.width = 1 + std::min(k, pool_size);
  plan.index.reserve(n * plan.width);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i) {
    pool.clear();
    if (n >= 2) {
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) pool.push_back(masked[j]);
    } else {
      for (std::size_t t = 0; t < length; ++t)
        if (t != masked[i]) pool.push_back(t);
    }
    plan.index.push_back(masked[i]);
    for (std::size_t j = 0; j + 1 < plan.width; ++j) {
      std::swap(pool[j], pool[j + rng.index(pool.size() - j)]);
      plan.index.push_back(pool[j]);
    }
  }
  return plan;
}

template <typename T>
Tensor<T> loss_aud_contrastive(Tape<T>& tape, const Tensor<T>& context, const Tensor<T>& targets,
                               const DistractorPlan& plan, double kappa) {
  if (context.rank() != 2 || targets.rank() != 2 || context.dim(1) != targets.dim(1))
    throw InvalidArgument("loss_aud_contrastive: context and targets must share the projection dim");
  const std::size_t n = context.dim(0);
  if (n == 0) throw InvalidArgument("loss_aud_contrastive: empty masked set");
  if (plan.width == 0 || plan.index.size() != n * plan.width)
    throw InvalidArgument("loss_aud_contrastive: distractor plan does not match the masked set");
  if (!(kappa > 0.0)) throw InvalidArgument("loss_aud_contrastive: kappa must be positive");
  if (plan.width == 1) return Tensor<T>::scalar(T(0));
  auto sims = ops::cosine_similarity(tape, context, targets);
  auto logits = ops::scale(tape, ops::gather_per_row(tape, sims, plan.index, plan.width), static_cast<T>(1.0 / kappa));
  std::vector<std::size_t> zero(n, 0);
  return ops::cross_entropy_rows(tape, logits, zero);
}

template <typename T>
Tensor<T> loss_aud_diversity(Tape<T>& tape, const Tensor<T>& probs, std::size_t groups, std::size_t entries) {
  if (groups == 0 || entries == 0 || probs.rank() != 2 || probs.dim(1) != groups * entries || probs.dim(0) == 0)
    throw InvalidArgument("loss_aud_diversity: probabilities must be [N, G*V]");
  auto pv = probs.values();
  const std::size_t n = probs.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      double s = 0;
      for (std::size_t v = 0; v < entries; ++v) s += pv[i * groups * entries + g * entries + v];
      if (std::abs(s - 1.0) > 1e-5)
        throw InvalidArgument("loss_aud_diversity: group probabilities do not sum to 1");
    }
  const double gv = static_cast<double>(groups * entries);
  auto mean = ops::reshape(tape, ops::mean_rows(tape, probs), {groups, entries});
  auto perplexity = ops::sum(tape, ops::exp(tape, ops::entropy_rows(tape, mean)));
  return ops::add(tape, ops::scale(tape, perplexity, static_cast<T>(-1.0 / gv)), Tensor<T>::scalar(T(1)));
}

template <typename T>
T combined_value(double alpha, T av, T r, T d, double diversity_weight) {
  const T aud = r + static_cast<T>(diversity_weight) * d;
  return static_cast<T>(alpha) * av + static_cast<T>(1.0 - alpha) * aud;
}

template <typename T>
Tensor<T> combined_loss(Tape<T>& tape, double alpha, const Tensor<T>* av, const Tensor<T>* r,
                        const Tensor<T>* d, double diversity_weight) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1], got " + std::to_string(alpha));
  const bool need_av = alpha > 0.0, need_aud = alpha < 1.0;
  if (need_av && av == nullptr) throw InvalidArgument("combined_loss: loss_av required when alpha > 0");
  if (need_aud && (r == nullptr || d == nullptr))
    throw InvalidArgument("combined_loss: acoustic losses required when alpha < 1");
  auto zero = Tensor<T>::scalar(T(0));
  const Tensor<T>& av_t = av ? *av : zero;
  const Tensor<T>& r_t = r ? *r : zero;
  const Tensor<T>& d_t = d ? *d : zero;
  auto aud = ops::add(tape, r_t, ops::scale(tape, d_t, static_cast<T>(diversity_weight)));
  return ops::add(tape, ops::scale(tape, av_t, static_cast<T>(alpha)),
                  ops::scale(tape, aud, static_cast<T>(1.0 - alpha)));
}

template <typename T>
LossReport make_report(double alpha, T av, T r, T d, double diversity_weight) {
  LossReport rep;
  rep.loss_av = av;
  rep.loss_aud_r = r;
  rep.loss_aud_d = d;
  rep.loss_aud = r + static_cast<T>(diversity_weight) * d;
  rep.combined = combined_value<T>(alpha, av, r, d, diversity_weight);
  return rep;
}

#define SCHEDLAB_INSTANTIATE_LOSSES(T)                                                                      \
  template Tensor<T> loss_av<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>, \
                                double);                                                                     \
  template Tensor<T> loss_aud_contrastive<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                             const DistractorPlan&, double);                                 \
  template Tensor<T> loss_aud_diversity<T>(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);           \
  template T combined_value<T>(double, T, T, T, double);                                                     \
  template Tensor<T> combined_loss<T>(Tape<T>&, double, const Tensor<T>*, const Tensor<T>*,                  \
                                      const Tensor<T>*, double);                                             \
  template LossReport make_report<T>(double, T, T, T, double);

SCHEDLAB_INSTANTIATE_LOSSES(float)
SCHEDLAB_INSTANTIATE_LOSSES(double)

}  // namespace schedlab::objectives
