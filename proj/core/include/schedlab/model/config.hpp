#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "schedlab/autodiff/tensor.hpp"

namespace schedlab::model {

enum class ParamGroup { shared, ssl_only, vgs_audio_only, image_only };

const char* group_name(ParamGroup g);
ParamGroup parse_group(const std::string& name);

/// One strided conv of the frontend; every layer outputs d_z channels.
struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

struct MaskPolicy {
  double p_start = 0.15;
  std::size_t span = 3;
};

struct CodebookSpec {
  std::size_t groups = 2;
  std::size_t entries = 16;
  /// Total code dimension; each group contributes code_dim / groups.
  std::size_t code_dim = 64;
  double temperature = 0.5;
  bool hard = true;
};

/// Temporal downsampling before the VGS audio transformer.
struct DownsamplerSpec {
  std::size_t blocks = 2;
  std::size_t kernel = 3;
  std::size_t pool = 2;
};

struct ModelConfig {
  std::string preset = "toy";
  std::size_t feat_dim = 13;
  std::vector<ConvLayerSpec> frontend{{3, 2}, {3, 2}};
  std::size_t d_z = 64;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 2;
  /// Common dimension of the context and target projections.
  std::size_t proj_dim = 64;
  CodebookSpec codebook{};
  MaskPolicy mask{};
  DownsamplerSpec downsampler{};
  std::size_t vgs_audio_layers = 2;
  std::size_t image_layers = 2;
  std::size_t image_token_dim = 16;
  std::size_t emb_dim = 64;
  double dropout = 0.1;
  bool vgs_uses_masked_stream = false;
  bool image_positional = false;

  /// Smallest input length whose every output frame sees real input.
  std::size_t receptive_field() const;
  /// Latent length for T input frames; throws below the receptive field.
  std::size_t latent_length(std::size_t frames) const;
  std::size_t ssl_layers() const { return enc_layers + dec_layers; }
  /// Throws InvalidArgument naming the first violated constraint.
  void validate() const;
};

/// "toy" or "paper".
ModelConfig preset(const std::string& name);

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Strict: starts from the preset named by "preset" (default toy), then
/// applies overrides; unknown keys raise InvalidArgument.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParamInfo {
  std::string name;
  ad::Shape shape;
  ParamGroup group;
};

/// Canonical parameter list of a configuration, without allocating weights.
std::vector<ParamInfo> param_layout(const ModelConfig& c);

}  // namespace schedlab::model
