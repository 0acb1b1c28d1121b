#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>

#include "schedlab/autodiff/ops.hpp"
#include "schedlab/util/rng.hpp"

namespace schedlab::objectives {

using ad::Tape;
using ad::Tensor;

struct LossConfig {
  double alpha = 0.5;
  /// Cross-modal temperature.
  double tau = 0.07;
  /// Acoustic temperature.
  double kappa = 0.1;
  std::size_t distractors = 10;
  double diversity_weight = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

struct LossReport {
  double loss_av = 0.0;
  double loss_aud_r = 0.0;
  double loss_aud_d = 0.0;
  double loss_aud = 0.0;
  double combined = 0.0;
  /// Fraction of captions whose best-scoring in-batch image is a true match.
  double batch_recall1 = 0.0;
};

/// Masked, marginalized InfoNCE over a batch. audio and image are [B, e] with
/// unit rows; duplicate[i * B + j] != 0 marks image j as another true match of
/// caption i, which removes it from that row's negatives (and from column i's
/// negatives in the image-to-audio direction). Returns the mean of the two
/// directions.
template <typename T>
Tensor<T> loss_av(Tape<T>& tape, const Tensor<T>& audio, const Tensor<T>& image,
                  std::span<const std::uint8_t> duplicate, double tau);

/// duplicate mask for a batch whose i-th caption belongs to image_ids[i].
std::vector<std::uint8_t> duplicate_mask(std::span<const std::uint32_t> image_ids);

/// Distractor indices for masked contrastive prediction: row i lists its
/// target position first, then up to `k` distinct other masked positions (or,
/// with a single masked position, other unmasked positions). Rows are padded
/// to a common width, so the returned width is 1 + min(k, pool size).
struct DistractorPlan {
  std::vector<std::size_t> index;  // row-major [|M|, width]
  std::size_t width = 0;
};
DistractorPlan sample_distractors(std::span<const std::size_t> masked, std::size_t length,
                                  std::size_t k, Rng& rng);

/// Masked contrastive acoustic loss for one utterance. context is [|M|, P]
/// (masked rows in order), targets is [T_z, P].
template <typename T>
Tensor<T> loss_aud_contrastive(Tape<T>& tape, const Tensor<T>& context, const Tensor<T>& targets,
                               const DistractorPlan& plan, double kappa);

/// Codebook diversity: probs is [N, G*V] with each group's block summing to
/// one; rows are averaged before taking per-group entropies.
template <typename T>
Tensor<T> loss_aud_diversity(Tape<T>& tape, const Tensor<T>& probs, std::size_t groups,
                             std::size_t entries);

/// alpha * av + (1 - alpha) * (r + w * d), evaluated in T with the same
/// operation order as combined_loss.
template <typename T>
T combined_value(double alpha, T av, T r, T d, double diversity_weight = 0.1);

/// Taped combination. A null term is only allowed when its coefficient is
/// zero (the corresponding forward pass was skipped).
template <typename T>
Tensor<T> combined_loss(Tape<T>& tape, double alpha, const Tensor<T>* av, const Tensor<T>* r,
                        const Tensor<T>* d, double diversity_weight = 0.1);

/// Fills a report from component values, with combined from combined_value.
template <typename T>
LossReport make_report(double alpha, T av, T r, T d, double diversity_weight = 0.1);

}  // namespace schedlab::objectives
