#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "schedlab/autodiff/ops.hpp"
#include "schedlab/model/config.hpp"
#include "schedlab/util/rng.hpp"

namespace schedlab::model {

using ad::Tape;
using ad::Tensor;

template <typename T>
struct Param {
  std::string name;
  ParamGroup group;
  Tensor<T> value;
};

/// Masked latent positions of one utterance, sorted ascending.
struct MaskSpec {
  std::vector<std::size_t> positions;
  std::size_t length = 0;
};

/// Span masking: each position starts a span with probability p_start; spans
/// have length `span` clipped at the end. An empty draw forces one span.
MaskSpec draw_span_mask(std::size_t length, const MaskPolicy& policy, Rng& rng);

/// Forward-pass switches. Dropout is active only when `train` is set and an
/// rng is given; the quantizer draws Gumbel noise only when `train` is set.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
  /// Overrides the configured hard/soft quantizer forward.
  std::optional<bool> hard_codes;
};

template <typename T>
struct SslOutput {
  MaskSpec mask;
  /// Projected context at masked positions, [|M|, proj_dim].
  Tensor<T> context;
  /// Projected quantized targets at every latent position, [T_z, proj_dim].
  Tensor<T> targets;
  /// Noise-free code probabilities at masked positions, [|M|, G*V].
  Tensor<T> code_probs;
  /// Output of every encoder then decoder layer, each [T_z, d_model].
  std::vector<Tensor<T>> layers;
};

template <typename T>
struct VgsOutput {
  Tensor<T> audio;  // [1, emb_dim], unit norm
  Tensor<T> image;  // [1, emb_dim], unit norm
  std::vector<Tensor<T>> layers;
};

/// Parameters plus topology. Forward functions are const and build on the
/// caller's tape; parameters are leaves that require gradients.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  /// Empty parameters in the canonical layout (for loading).
  explicit Model(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Param<T>>& params() noexcept { return params_; }
  const std::vector<Param<T>>& params() const noexcept { return params_; }
  const Tensor<T>& param(const std::string& name) const;
  Tensor<T>& param(const std::string& name);
  std::vector<Tensor<T>> tensors() const;
  std::size_t parameter_count() const;
  /// SHA-256 over names and raw values of the parameters in `group`
  /// (all parameters when empty).
  std::string hash(std::optional<ParamGroup> group = std::nullopt) const;

  /// frames [F, T] -> conv features [d_z, T_z].
  Tensor<T> forward_frontend(Tape<T>& tape, const Tensor<T>& frames) const;
  /// frames [F, T] -> normalized latent sequence [T_z, d_z].
  Tensor<T> latent(Tape<T>& tape, const Tensor<T>& frames) const;
  /// Replaces masked rows of z [T_z, d_z] with the learned mask embedding.
  std::pair<Tensor<T>, MaskSpec> apply_span_mask(Tape<T>& tape, const Tensor<T>& z, Rng& rng) const;
  Tensor<T> mask_latent(Tape<T>& tape, const Tensor<T>& z, const MaskSpec& mask) const;
  /// Shared encoder over z [T_z, d_z]; returns each layer's output.
  std::vector<Tensor<T>> encode(Tape<T>& tape, const Tensor<T>& z, const ForwardContext& ctx) const;

  SslOutput<T> forward_ssl(Tape<T>& tape, const Tensor<T>& frames, Rng& mask_rng,
                           const ForwardContext& ctx) const;
  /// SSL forward with a caller-supplied mask.
  SslOutput<T> forward_ssl(Tape<T>& tape, const Tensor<T>& frames, const MaskSpec& mask,
                           const ForwardContext& ctx) const;

  /// Audio CLS embedding from the output of the shared encoder.
  Tensor<T> vgs_audio(Tape<T>& tape, const Tensor<T>& encoded, const ForwardContext& ctx) const;
  Tensor<T> audio_embedding(Tape<T>& tape, const Tensor<T>& frames, const ForwardContext& ctx) const;
  /// tokens [n_objects, D_img] -> [1, emb_dim].
  Tensor<T> image_embedding(Tape<T>& tape, const Tensor<T>& tokens, const ForwardContext& ctx) const;
  VgsOutput<T> forward_vgs(Tape<T>& tape, const Tensor<T>& frames, const Tensor<T>& tokens,
                           const ForwardContext& ctx) const;

  /// Unmasked, dropout-free features of SSL-stream layer `layer` (1-based:
  /// encoder layers first, then decoder layers), [T_z, d_model].
  Tensor<T> extract_layer_features(const Tensor<T>& frames, std::size_t layer) const;
  /// All SSL-stream layers in one pass.
  std::vector<Tensor<T>> extract_all_layers(const Tensor<T>& frames) const;

 private:
  Tensor<T> transformer_layer(Tape<T>& tape, const Tensor<T>& x, const std::string& prefix,
                              const ForwardContext& ctx) const;
  Tensor<T> maybe_dropout(Tape<T>& tape, const Tensor<T>& x, const ForwardContext& ctx) const;
  std::vector<Tensor<T>> decode(Tape<T>& tape, const Tensor<T>& x, const ForwardContext& ctx) const;

  ModelConfig config_;
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Fixed sinusoidal positional encoding, [length, dim].
template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t length, std::size_t dim);

/// Writes `model.json` (config, parameter index, groups, hash, `extra`) and
/// `params.bin` into `dir`.
template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& dir,
                const nlohmann::json& extra = nlohmann::json::object());

/// Reads a directory written by save_model; throws IoError when files are
/// missing or the parameter hash does not match.
template <typename T>
Model<T> load_model(const std::filesystem::path& dir);

/// The `extra` object stored by save_model.
nlohmann::json read_model_extra(const std::filesystem::path& dir);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace schedlab::model
