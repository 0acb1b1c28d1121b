#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "schedlab/autodiff/adam.hpp"
#include "schedlab/corpus/corpus.hpp"
#include "schedlab/model/model.hpp"
#include "schedlab/objectives/losses.hpp"

namespace schedlab::trainer {

struct PhaseSpec {
  std::string name;
  double alpha = 1.0;
  std::size_t epochs = 1;
  bool reset_optimizer_on_entry = false;
};

struct ScheduleSpec {
  std::string variant = "custom";
  std::vector<PhaseSpec> phases;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  double lr0 = 1e-4;
  double warmup_fraction = 0.1;
  std::size_t checkpoint_period = 5;
  /// Start a fresh warmup + decay segment whenever the optimizer is reset.
  bool restart_lr_on_reset = true;

  std::size_t total_epochs() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PhaseSpec& p);
void from_json(const nlohmann::json& j, PhaseSpec& p);
void to_json(nlohmann::json& j, const ScheduleSpec& s);
void from_json(const nlohmann::json& j, ScheduleSpec& s);

/// The nine training variants in canonical spelling.
const std::vector<std::string>& variant_names();
/// Accepts the canonical names with any whitespace; throws InvalidArgument
/// listing the valid names otherwise.
ScheduleSpec variant_preset(const std::string& name);
/// Same variant with the pretraining / main phase lengths replaced; base
/// variants run for their sum.
ScheduleSpec variant_preset(const std::string& name, std::size_t pretrain_epochs, std::size_t main_epochs);

/// Linear warmup to lr0 over ceil(warmup_fraction * total_steps) steps, then
/// linear decay to zero at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, double warmup_fraction, double lr0);

struct EpochRow {
  std::size_t epoch = 0;
  std::string phase;
  double alpha = 0.0;
  double loss_av = 0.0;
  double loss_aud_r = 0.0;
  double loss_aud_d = 0.0;
  double loss_combined = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

class TrainLog {
 public:
  static constexpr const char* kHeader = "epoch,phase,alpha,loss_av,loss_aud_r,loss_aud_d,loss_combined,lr,seconds";

  /// Rows must arrive in strictly increasing epoch order.
  void append(const EpochRow& row);
  const std::vector<EpochRow>& rows() const noexcept { return rows_; }
  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);

 private:
  std::vector<EpochRow> rows_;
};

struct StepInfo {
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  std::string phase;
  double alpha = 0.0;
  double lr = 0.0;
  std::uint64_t adam_t = 0;
  objectives::LossReport report;
  /// Utterance indices of the batch.
  std::vector<std::uint32_t> batch;
};

struct TrainOptions {
  objectives::LossConfig loss{};
  ad::AdamConfig adam{};
  /// Evaluate the loss of the inactive objective (without gradients) so that
  /// both curves are logged in every phase.
  bool monitor_inactive = true;
  /// Record real per-epoch timings in the seconds column (breaks byte-level
  /// reproducibility of train_log.csv); timings always go to timing.csv.
  bool log_wall_clock = false;
  /// Merged into run.json.
  nlohmann::json run_extra = nlohmann::json::object();
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochRow&)> on_epoch;
};

struct TrainResult {
  model::Model<float> model;
  TrainLog log;
  std::vector<std::size_t> checkpoint_epochs;
};

/// Trains `initial` (or a fresh model seeded from spec.seed) over the train
/// split of `corpus`, writing train_log.csv, timing.csv, run.json and
/// ckpt_<epoch>/ under `out`. Epochs are numbered continuously across phases
/// starting at 1; ckpt_0 holds the starting weights.
TrainResult run_schedule(const ScheduleSpec& spec, const corpus::Corpus& corpus,
                         const model::ModelConfig& config, const std::filesystem::path& out,
                         const TrainOptions& options = {},
                         const model::Model<float>* initial = nullptr);

/// Seed used for a fresh model of a schedule.
std::uint64_t model_seed(std::uint64_t schedule_seed);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, std::size_t epoch);
std::vector<std::size_t> available_checkpoints(const std::filesystem::path& run_dir);
/// Throws InvalidArgument listing the available epochs when missing, IoError
/// when corrupt.
model::Model<float> load_checkpoint(const std::filesystem::path& run_dir, std::size_t epoch);

/// Frames of an utterance as a [F, T] tensor.
template <typename T = float>
ad::Tensor<T> frames_tensor(const corpus::Utterance& u, std::size_t feat_dim);
template <typename T = float>
ad::Tensor<T> tokens_tensor(const corpus::ImageScene& s, std::size_t token_dim);

/// Taped losses of one batch. The VGS branch runs only when alpha > 0 and the
/// SSL branch only when alpha < 1; skipped terms stay empty.
template <typename T>
struct BatchLoss {
  ad::Tensor<T> total;
  std::optional<ad::Tensor<T>> av, r, d;
  /// In-batch speech-to-image recall@1 (VGS branch only).
  double recall1 = 0.0;
};

/// Examples are processed one at a time on the shared tape. `rng` drives span
/// masks and distractor sampling; dropout and Gumbel noise follow `ctx`.
template <typename T>
BatchLoss<T> batch_loss(ad::Tape<T>& tape, const model::Model<T>& model, const corpus::Corpus& corpus,
                        std::span<const std::uint32_t> batch, double alpha, const objectives::LossConfig& loss,
                        const model::ForwardContext& ctx, Rng& rng);

}  // namespace schedlab::trainer
