#include "schedlab/model/config.hpp"

#include "schedlab/util/error.hpp"
#include "schedlab/util/json_fields.hpp"

namespace schedlab::model {
using nlohmann::json;

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::shared: return "shared";
    case ParamGroup::ssl_only: return "ssl_only";
    case ParamGroup::vgs_audio_only: return "vgs_audio_only";
    case ParamGroup::image_only: return "image_only";
  }
  return "?";
}

ParamGroup parse_group(const std::string& name) {
  for (auto g : {ParamGroup::shared, ParamGroup::ssl_only, ParamGroup::vgs_audio_only, ParamGroup::image_only})
    if (name == group_name(g)) return g;
  throw InvalidArgument("unknown parameter group '" + name + "'");
}

std::size_t ModelConfig::receptive_field() const {
  std::size_t rf = 1, jump = 1;
  for (const auto& l : frontend) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

std::size_t ModelConfig::latent_length(std::size_t frames) const {
  const std::size_t rf = receptive_field();
  if (frames < rf) {
    throw InvalidArgument("frontend: input of " + std::to_string(frames) +
                          " frames is shorter than the receptive field (" + std::to_string(rf) + ")");
  }
  std::size_t t = frames;
  for (const auto& l : frontend) t = (t + l.stride - 1) / l.stride;
  return t;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string("model config: ") + what);
  };
  need(feat_dim > 0, "feat_dim must be positive");
  need(!frontend.empty(), "frontend needs at least one conv layer");
  for (const auto& l : frontend) need(l.kernel > 0 && l.stride > 0, "conv kernel and stride must be positive");
  need(d_z > 0 && d_model > 0 && ffn_dim > 0 && proj_dim > 0 && emb_dim > 0, "all dims must be positive");
  need(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
  need(enc_layers >= 1, "enc_layers must be >= 1");
  need(dec_layers >= 1, "dec_layers must be >= 1");
  need(codebook.groups * codebook.entries >= 2, "codebook needs G*V >= 2");
  need(codebook.groups > 0 && codebook.code_dim % codebook.groups == 0,
       "codebook code_dim must be divisible by groups");
  need(codebook.temperature > 0, "codebook temperature must be positive");
  need(mask.p_start >= 0 && mask.p_start <= 1, "mask p_start must lie in [0,1]");
  need(mask.span >= 1, "mask span must be >= 1");
  need(downsampler.kernel > 0 && downsampler.pool > 0, "downsampler kernel and pool must be positive");
  need(vgs_audio_layers >= 1 && image_layers >= 1, "VGS transformers need at least one layer");
  need(image_token_dim > 0, "image_token_dim must be positive");
  need(dropout >= 0 && dropout < 1, "dropout must lie in [0,1)");
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "toy") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.frontend = {{10, 5}, {3, 2}, {3, 2}, {3, 2}, {2, 2}, {2, 2}};
    c.d_z = 512;
    c.d_model = 768;
    c.heads = 12;
    c.ffn_dim = 3072;
    c.enc_layers = 8;
    c.dec_layers = 4;
    c.proj_dim = 256;
    c.codebook = {2, 320, 256, 0.5, true};
    c.mask = {0.065, 10};
    c.vgs_audio_layers = 2;
    c.image_layers = 6;
    c.image_token_dim = 2048;
    c.emb_dim = 768;
    return c;
  }
  throw InvalidArgument("unknown model preset '" + name + "' (expected toy or paper)");
}

void to_json(json& j, const ModelConfig& c) {
  json frontend = json::array();
  for (const auto& l : c.frontend) frontend.push_back({{"kernel", l.kernel}, {"stride", l.stride}});
  j = json{{"preset", c.preset},
           {"feat_dim", c.feat_dim},
           {"frontend", frontend},
           {"d_z", c.d_z},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"ffn_dim", c.ffn_dim},
           {"enc_layers", c.enc_layers},
           {"dec_layers", c.dec_layers},
           {"proj_dim", c.proj_dim},
           {"codebook",
            {{"groups", c.codebook.groups},
             {"entries", c.codebook.entries},
             {"code_dim", c.codebook.code_dim},
             {"temperature", c.codebook.temperature},
             {"hard", c.codebook.hard}}},
           {"mask", {{"p_start", c.mask.p_start}, {"span", c.mask.span}}},
           {"downsampler",
            {{"blocks", c.downsampler.blocks}, {"kernel", c.downsampler.kernel}, {"pool", c.downsampler.pool}}},
           {"vgs_audio_layers", c.vgs_audio_layers},
           {"image_layers", c.image_layers},
           {"image_token_dim", c.image_token_dim},
           {"emb_dim", c.emb_dim},
           {"dropout", c.dropout},
           {"vgs_uses_masked_stream", c.vgs_uses_masked_stream},
           {"image_positional", c.image_positional}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw InvalidArgument("model config must be an object");
  std::string name = "toy";
  if (j.contains("preset")) {
    if (!j.at("preset").is_string()) throw InvalidArgument("config key 'preset' must be a string");
    name = j.at("preset").get<std::string>();
  }
  c = preset(name);
  JsonFields f(j, "");
  f.mark("preset")
      .opt("feat_dim", c.feat_dim)
      .mark("frontend")
      .opt("d_z", c.d_z)
      .opt("d_model", c.d_model)
      .opt("heads", c.heads)
      .opt("ffn_dim", c.ffn_dim)
      .opt("enc_layers", c.enc_layers)
      .opt("dec_layers", c.dec_layers)
      .opt("proj_dim", c.proj_dim)
      .mark("codebook")
      .mark("mask")
      .mark("downsampler")
      .opt("vgs_audio_layers", c.vgs_audio_layers)
      .opt("image_layers", c.image_layers)
      .opt("image_token_dim", c.image_token_dim)
      .opt("emb_dim", c.emb_dim)
      .opt("dropout", c.dropout)
      .opt("vgs_uses_masked_stream", c.vgs_uses_masked_stream)
      .opt("image_positional", c.image_positional)
      .finish();
  if (j.contains("frontend")) {
    const auto& arr = j.at("frontend");
    if (!arr.is_array()) throw InvalidArgument("config key 'frontend' must be an array");
    c.frontend.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ConvLayerSpec l;
      JsonFields(arr[i], "frontend[" + std::to_string(i) + "]").req("kernel", l.kernel).req("stride", l.stride).finish();
      c.frontend.push_back(l);
    }
  }
  if (j.contains("codebook")) {
    JsonFields(j.at("codebook"), "codebook")
        .opt("groups", c.codebook.groups)
        .opt("entries", c.codebook.entries)
        .opt("code_dim", c.codebook.code_dim)
        .opt("temperature", c.codebook.temperature)
        .opt("hard", c.codebook.hard)
        .finish();
  }
  if (j.contains("mask")) {
    JsonFields(j.at("mask"), "mask").opt("p_start", c.mask.p_start).opt("span", c.mask.span).finish();
  }
  if (j.contains("downsampler")) {
    JsonFields(j.at("downsampler"), "downsampler")
        .opt("blocks", c.downsampler.blocks)
        .opt("kernel", c.downsampler.kernel)
        .opt("pool", c.downsampler.pool)
        .finish();
  }
  c.validate();
}

namespace {

void transformer_params(std::vector<ParamInfo>& out, const std::string& prefix, std::size_t d,
                        std::size_t ffn, ParamGroup g) {
  auto add = [&](const std::string& n, ad::Shape s) { out.push_back({prefix + "." + n, std::move(s), g}); };
  add("ln1.gamma", {d});
  add("ln1.beta", {d});
  for (const char* m : {"q", "k", "v", "o"}) {
    add(std::string("attn.w") + m, {d, d});
    add(std::string("attn.b") + m, {d});
  }
  add("ln2.gamma", {d});
  add("ln2.beta", {d});
  add("ffn.w1", {d, ffn});
  add("ffn.b1", {ffn});
  add("ffn.w2", {ffn, d});
  add("ffn.b2", {d});
}

}  // namespace

std::vector<ParamInfo> param_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamInfo> out;
  const std::size_t d = c.d_model;
  auto add = [&](std::string n, ad::Shape s, ParamGroup g) { out.push_back({std::move(n), std::move(s), g}); };

  std::size_t c_in = c.feat_dim;
  for (std::size_t i = 0; i < c.frontend.size(); ++i) {
    const std::string p = "frontend.conv" + std::to_string(i);
    add(p + ".w", {c.d_z, c_in, c.frontend[i].kernel}, ParamGroup::shared);
    add(p + ".b", {c.d_z}, ParamGroup::shared);
    c_in = c.d_z;
  }
  add("frontend.ln.gamma", {c.d_z}, ParamGroup::shared);
  add("frontend.ln.beta", {c.d_z}, ParamGroup::shared);
  add("encoder.in.w", {c.d_z, d}, ParamGroup::shared);
  add("encoder.in.b", {d}, ParamGroup::shared);
  for (std::size_t i = 0; i < c.enc_layers; ++i)
    transformer_params(out, "encoder.layer" + std::to_string(i), d, c.ffn_dim, ParamGroup::shared);

  add("ssl.mask_emb", {c.d_z}, ParamGroup::ssl_only);
  for (std::size_t i = 0; i < c.dec_layers; ++i)
    transformer_params(out, "decoder.layer" + std::to_string(i), d, c.ffn_dim, ParamGroup::ssl_only);
  add("decoder.ln_out.gamma", {d}, ParamGroup::ssl_only);
  add("decoder.ln_out.beta", {d}, ParamGroup::ssl_only);
  add("ssl.proj_c.w", {d, c.proj_dim}, ParamGroup::ssl_only);
  add("ssl.proj_c.b", {c.proj_dim}, ParamGroup::ssl_only);
  const auto& cb = c.codebook;
  add("quantizer.logits.w", {c.d_z, cb.groups * cb.entries}, ParamGroup::ssl_only);
  add("quantizer.logits.b", {cb.groups * cb.entries}, ParamGroup::ssl_only);
  for (std::size_t g = 0; g < cb.groups; ++g)
    add("quantizer.codebook" + std::to_string(g), {cb.entries, cb.code_dim / cb.groups}, ParamGroup::ssl_only);
  add("ssl.proj_q.w", {cb.code_dim, c.proj_dim}, ParamGroup::ssl_only);
  add("ssl.proj_q.b", {c.proj_dim}, ParamGroup::ssl_only);

  for (std::size_t i = 0; i < c.downsampler.blocks; ++i) {
    const std::string p = "vgs.down" + std::to_string(i);
    add(p + ".w", {d, d, c.downsampler.kernel}, ParamGroup::vgs_audio_only);
    add(p + ".b", {d}, ParamGroup::vgs_audio_only);
  }
  add("vgs.cls", {d}, ParamGroup::vgs_audio_only);
  for (std::size_t i = 0; i < c.vgs_audio_layers; ++i)
    transformer_params(out, "vgs.layer" + std::to_string(i), d, c.ffn_dim, ParamGroup::vgs_audio_only);
  add("vgs.ln_out.gamma", {d}, ParamGroup::vgs_audio_only);
  add("vgs.ln_out.beta", {d}, ParamGroup::vgs_audio_only);
  add("vgs.head.w", {d, c.emb_dim}, ParamGroup::vgs_audio_only);
  add("vgs.head.b", {c.emb_dim}, ParamGroup::vgs_audio_only);

  add("image.in.w", {c.image_token_dim, d}, ParamGroup::image_only);
  add("image.in.b", {d}, ParamGroup::image_only);
  add("image.cls", {d}, ParamGroup::image_only);
  for (std::size_t i = 0; i < c.image_layers; ++i)
    transformer_params(out, "image.layer" + std::to_string(i), d, c.ffn_dim, ParamGroup::image_only);
  add("image.ln_out.gamma", {d}, ParamGroup::image_only);
  add("image.ln_out.beta", {d}, ParamGroup::image_only);
  add("image.head.w", {d, c.emb_dim}, ParamGroup::image_only);
  add("image.head.b", {c.emb_dim}, ParamGroup::image_only);
  return out;
}

}  // namespace schedlab::model
