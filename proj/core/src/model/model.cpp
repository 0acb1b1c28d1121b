#include "schedlab/model/model.hpp"

#include <cmath>
#include <fstream>

#include "schedlab/autodiff/serialize.hpp"
#include "schedlab/util/error.hpp"
#include "schedlab/util/hash.hpp"

namespace schedlab::model {
namespace fs = std::filesystem;
using nlohmann::json;
namespace ops = ad::ops;

constexpr const char* kModelFormat = "schedlab.model/1";

MaskSpec draw_span_mask(std::size_t length, const MaskPolicy& policy, Rng& rng) {
  if (length == 0) throw InvalidArgument("span mask: empty sequence");
  std::vector<std::uint8_t> hit(length, 0);
  bool any = false;
  for (std::size_t t = 0; t < length; ++t) {
    if (rng.bernoulli(policy.p_start)) {
      for (std::size_t u = t; u < std::min(length, t + policy.span); ++u) hit[u] = 1;
      any = true;
    }
  }
  if (!any) {
    const std::size_t span = std::min(policy.span, length);
    const std::size_t start = rng.index(length - span + 1);
    for (std::size_t u = start; u < start + span; ++u) hit[u] = 1;
  }
  MaskSpec m;
  m.length = length;
  for (std::size_t t = 0; t < length; ++t)
    if (hit[t]) m.positions.push_back(t);
  return m;
}

template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t length, std::size_t dim) {
  std::vector<T> v(length * dim);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      v[t * dim + i] = static_cast<T>(std::sin(angle));
      if (i + 1 < dim) v[t * dim + i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>::from({length, dim}, std::move(v));
}

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  for (auto& info : param_layout(config_)) {
    index_[info.name] = params_.size();
    params_.push_back({info.name, info.group, Tensor<T>::zeros(info.shape, true)});
  }
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : Model(std::move(config)) {
  Rng rng(mix_seed({seed, 0x6d6f64656cULL}));
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (auto& p : params_) {
    auto v = p.value.mutable_values();
    const auto& shape = p.value.shape();
    double sd = 0.0;
    if (ends_with(p.name, ".gamma")) {
      std::fill(v.begin(), v.end(), T(1));
      continue;
    }
    if (ends_with(p.name, ".cls")) {
      sd = 0.02;
    } else if (ends_with(p.name, "mask_emb") || p.name.find("codebook") != std::string::npos) {
      sd = 1.0;
    } else if (shape.size() == 2) {
      sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    } else if (shape.size() == 3) {
      sd = 1.0 / std::sqrt(static_cast<double>(shape[1] * shape[2]));
    }
    for (auto& x : v) x = sd == 0.0 ? T(0) : static_cast<T>(rng.normal() * sd);
  }
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
Tensor<T>& Model<T>::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
std::string Model<T>::hash(std::optional<ParamGroup> group) const {
  Sha256 h;
  for (const auto& p : params_) {
    if (group && p.group != *group) continue;
    h.update(p.name);
    auto v = p.value.values();
    h.update(std::as_bytes(std::span<const T>(v.data(), v.size())));
  }
  return h.hex();
}

template <typename T>
Tensor<T> Model<T>::maybe_dropout(Tape<T>& tape, const Tensor<T>& x, const ForwardContext& ctx) const {
  if (!ctx.train || ctx.rng == nullptr || config_.dropout <= 0.0) return x;
  return ops::dropout(tape, x, config_.dropout, *ctx.rng);
}

template <typename T>
Tensor<T> Model<T>::forward_frontend(Tape<T>& tape, const Tensor<T>& frames) const {
  if (frames.rank() != 2 || frames.dim(0) != config_.feat_dim) {
    throw InvalidArgument("frontend: expected frames of shape [" + std::to_string(config_.feat_dim) +
                          ", T], got " + ad::shape_str(frames.shape()));
  }
  config_.latent_length(frames.dim(1));
  Tensor<T> x = frames;
  for (std::size_t i = 0; i < config_.frontend.size(); ++i) {
    const auto& l = config_.frontend[i];
    const std::string p = "frontend.conv" + std::to_string(i);
    auto geom = ad::ops::Conv1dGeometry::same(x.dim(1), l.kernel, l.stride);
    x = ops::gelu(tape, ops::conv1d(tape, x, param(p + ".w"), param(p + ".b"), geom));
  }
  return x;
}

template <typename T>
Tensor<T> Model<T>::latent(Tape<T>& tape, const Tensor<T>& frames) const {
  auto x = ops::transpose(tape, forward_frontend(tape, frames));
  return ops::layer_norm(tape, x, param("frontend.ln.gamma"), param("frontend.ln.beta"));
}

template <typename T>
Tensor<T> Model<T>::mask_latent(Tape<T>& tape, const Tensor<T>& z, const MaskSpec& mask) const {
  for (auto p : mask.positions)
    if (p >= z.dim(0)) throw InvalidArgument("mask position out of range");
  return ops::replace_rows(tape, z, mask.positions, param("ssl.mask_emb"));
}

template <typename T>
std::pair<Tensor<T>, MaskSpec> Model<T>::apply_span_mask(Tape<T>& tape, const Tensor<T>& z, Rng& rng) const {
  auto mask = draw_span_mask(z.dim(0), config_.mask, rng);
  auto masked = mask_latent(tape, z, mask);
  return {masked, std::move(mask)};
}

template <typename T>
Tensor<T> Model<T>::transformer_layer(Tape<T>& tape, const Tensor<T>& x, const std::string& prefix,
                                      const ForwardContext& ctx) const {
  auto P = [&](const char* n) -> const Tensor<T>& { return param(prefix + "." + n); };
  auto a = ops::layer_norm(tape, x, P("ln1.gamma"), P("ln1.beta"));
  auto q = ops::linear(tape, a, P("attn.wq"), P("attn.bq"));
  auto k = ops::linear(tape, a, P("attn.wk"), P("attn.bk"));
  auto v = ops::linear(tape, a, P("attn.wv"), P("attn.bv"));
  auto att = ops::multi_head_attention(tape, q, k, v, config_.heads);
  auto o = maybe_dropout(tape, ops::linear(tape, att, P("attn.wo"), P("attn.bo")), ctx);
  auto h = ops::add(tape, x, o);
  auto b = ops::layer_norm(tape, h, P("ln2.gamma"), P("ln2.beta"));
  auto f = ops::linear(tape, ops::gelu(tape, ops::linear(tape, b, P("ffn.w1"), P("ffn.b1"))), P("ffn.w2"),
                       P("ffn.b2"));
  return ops::add(tape, h, maybe_dropout(tape, f, ctx));
}

template <typename T>
std::vector<Tensor<T>> Model<T>::encode(Tape<T>& tape, const Tensor<T>& z, const ForwardContext& ctx) const {
  auto h = ops::linear(tape, z, param("encoder.in.w"), param("encoder.in.b"));
  h = ops::add(tape, h, sinusoidal_encoding<T>(h.dim(0), config_.d_model));
  h = maybe_dropout(tape, h, ctx);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    h = transformer_layer(tape, h, "encoder.layer" + std::to_string(i), ctx);
    out.push_back(h);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::decode(Tape<T>& tape, const Tensor<T>& x, const ForwardContext& ctx) const {
  std::vector<Tensor<T>> out;
  auto h = x;
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    h = transformer_layer(tape, h, "decoder.layer" + std::to_string(i), ctx);
    out.push_back(h);
  }
  return out;
}

template <typename T>
SslOutput<T> Model<T>::forward_ssl(Tape<T>& tape, const Tensor<T>& frames, Rng& mask_rng,
                                   const ForwardContext& ctx) const {
  const std::size_t tz = config_.latent_length(frames.dim(1));
  return forward_ssl(tape, frames, draw_span_mask(tz, config_.mask, mask_rng), ctx);
}

template <typename T>
SslOutput<T> Model<T>::forward_ssl(Tape<T>& tape, const Tensor<T>& frames, const MaskSpec& mask,
                                   const ForwardContext& ctx) const {
  const auto& cb = config_.codebook;
  SslOutput<T> out;
  auto z = latent(tape, frames);
  if (mask.length != z.dim(0) || mask.positions.empty())
    throw InvalidArgument("forward_ssl: mask does not match the latent length or is empty");
  out.mask = mask;

  auto enc = encode(tape, mask_latent(tape, z, mask), ctx);
  auto dec = decode(tape, enc.back(), ctx);
  auto top = ops::layer_norm(tape, dec.back(), param("decoder.ln_out.gamma"), param("decoder.ln_out.beta"));
  out.context = ops::linear(tape, ops::gather_rows(tape, top, std::span<const std::size_t>(mask.positions)),
                            param("ssl.proj_c.w"), param("ssl.proj_c.b"));

  // Targets come from the unmasked latent.
  auto logits = ops::linear(tape, z, param("quantizer.logits.w"), param("quantizer.logits.b"));
  const bool hard = ctx.hard_codes.value_or(cb.hard);
  auto gs = ops::gumbel_softmax_st(tape, logits, cb.groups, cb.entries, cb.temperature,
                                   ctx.train ? ctx.rng : nullptr, hard);
  std::vector<Tensor<T>> parts, probs;
  auto masked_logits = ops::gather_rows(tape, logits, std::span<const std::size_t>(mask.positions));
  for (std::size_t g = 0; g < cb.groups; ++g) {
    auto sel = ops::slice_cols(tape, gs.codes, g * cb.entries, cb.entries);
    parts.push_back(ops::matmul(tape, sel, param("quantizer.codebook" + std::to_string(g))));
    probs.push_back(ops::softmax_rows(tape, ops::slice_cols(tape, masked_logits, g * cb.entries, cb.entries)));
  }
  auto q = cb.groups == 1 ? parts[0] : ops::concat_cols(tape, parts);
  out.targets = ops::linear(tape, q, param("ssl.proj_q.w"), param("ssl.proj_q.b"));
  out.code_probs = cb.groups == 1 ? probs[0] : ops::concat_cols(tape, probs);
  out.layers = std::move(enc);
  out.layers.insert(out.layers.end(), dec.begin(), dec.end());
  return out;
}

template <typename T>
Tensor<T> Model<T>::vgs_audio(Tape<T>& tape, const Tensor<T>& encoded, const ForwardContext& ctx) const {
  const std::size_t d = config_.d_model;
  auto x = ops::transpose(tape, encoded);
  for (std::size_t i = 0; i < config_.downsampler.blocks; ++i) {
    const std::string p = "vgs.down" + std::to_string(i);
    auto geom = ad::ops::Conv1dGeometry::same(x.dim(1), config_.downsampler.kernel, 1);
    x = ops::relu(tape, ops::conv1d(tape, x, param(p + ".w"), param(p + ".b"), geom));
    x = ops::avg_pool1d(tape, x, config_.downsampler.pool);
  }
  x = ops::transpose(tape, x);
  auto cls = ops::reshape(tape, param("vgs.cls"), {1, d});
  auto h = ops::concat_rows(tape, std::vector<Tensor<T>>{cls, x});
  h = ops::add(tape, h, sinusoidal_encoding<T>(h.dim(0), d));
  h = maybe_dropout(tape, h, ctx);
  for (std::size_t i = 0; i < config_.vgs_audio_layers; ++i)
    h = transformer_layer(tape, h, "vgs.layer" + std::to_string(i), ctx);
  auto top = ops::layer_norm(tape, ops::slice_rows(tape, h, 0, 1), param("vgs.ln_out.gamma"), param("vgs.ln_out.beta"));
  return ops::l2_normalize_rows(tape, ops::linear(tape, top, param("vgs.head.w"), param("vgs.head.b")));
}

template <typename T>
Tensor<T> Model<T>::audio_embedding(Tape<T>& tape, const Tensor<T>& frames, const ForwardContext& ctx) const {
  auto z = latent(tape, frames);
  if (config_.vgs_uses_masked_stream && ctx.train && ctx.rng != nullptr) z = apply_span_mask(tape, z, *ctx.rng).first;
  return vgs_audio(tape, encode(tape, z, ctx).back(), ctx);
}

template <typename T>
Tensor<T> Model<T>::image_embedding(Tape<T>& tape, const Tensor<T>& tokens, const ForwardContext& ctx) const {
  const std::size_t d = config_.d_model;
  if (tokens.rank() != 2 || tokens.dim(1) != config_.image_token_dim || tokens.dim(0) == 0)
    throw InvalidArgument("image encoder: expected tokens [n, " + std::to_string(config_.image_token_dim) +
                          "], got " + ad::shape_str(tokens.shape()));
  auto x = ops::linear(tape, tokens, param("image.in.w"), param("image.in.b"));
  auto cls = ops::reshape(tape, param("image.cls"), {1, d});
  auto h = ops::concat_rows(tape, std::vector<Tensor<T>>{cls, x});
  if (config_.image_positional) h = ops::add(tape, h, sinusoidal_encoding<T>(h.dim(0), d));
  h = maybe_dropout(tape, h, ctx);
  for (std::size_t i = 0; i < config_.image_layers; ++i)
    h = transformer_layer(tape, h, "image.layer" + std::to_string(i), ctx);
  auto top = ops::layer_norm(tape, ops::slice_rows(tape, h, 0, 1), param("image.ln_out.gamma"),
                             param("image.ln_out.beta"));
  return ops::l2_normalize_rows(tape, ops::linear(tape, top, param("image.head.w"), param("image.head.b")));
}

template <typename T>
VgsOutput<T> Model<T>::forward_vgs(Tape<T>& tape, const Tensor<T>& frames, const Tensor<T>& tokens,
                                   const ForwardContext& ctx) const {
  VgsOutput<T> out;
  auto z = latent(tape, frames);
  if (config_.vgs_uses_masked_stream && ctx.train && ctx.rng != nullptr) z = apply_span_mask(tape, z, *ctx.rng).first;
  out.layers = encode(tape, z, ctx);
  out.audio = vgs_audio(tape, out.layers.back(), ctx);
  out.image = image_embedding(tape, tokens, ctx);
  return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::extract_all_layers(const Tensor<T>& frames) const {
  auto tape = Tape<T>::inference();
  ForwardContext ctx;
  auto enc = encode(tape, latent(tape, frames), ctx);
  auto dec = decode(tape, enc.back(), ctx);
  enc.insert(enc.end(), dec.begin(), dec.end());
  for (auto& t : enc) t = t.detach();
  return enc;
}

template <typename T>
Tensor<T> Model<T>::extract_layer_features(const Tensor<T>& frames, std::size_t layer) const {
  const std::size_t n = config_.ssl_layers();
  if (layer < 1 || layer > n)
    throw InvalidArgument("layer " + std::to_string(layer) + " out of range [1, " + std::to_string(n) + "]");
  auto tape = Tape<T>::inference();
  ForwardContext ctx;
  auto enc = encode(tape, latent(tape, frames), ctx);
  if (layer <= config_.enc_layers) return enc[layer - 1].detach();
  return decode(tape, enc.back(), ctx)[layer - config_.enc_layers - 1].detach();
}

// --- persistence -------------------------------------------------------------

template <typename T>
void save_model(const Model<T>& model, const fs::path& dir, const json& extra) {
  fs::create_directories(dir);
  const auto bin = dir / "params.bin";
  {
    std::ofstream os(bin, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + bin.string());
    for (const auto& p : model.params()) ad::write_tensor(os, p.name, p.value);
    if (!os) throw IoError("write failed for " + bin.string());
  }
  json index = json::array();
  for (const auto& p : model.params())
    index.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"group", group_name(p.group)}});
  json meta{{"format", kModelFormat},
            {"config", model.config()},
            {"params", index},
            {"params_sha256", sha256_file(bin)},
            {"extra", extra}};
  std::ofstream os(dir / "model.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "model.json").string());
  os << meta.dump(1) << '\n';
}

namespace {

json read_meta(const fs::path& dir) {
  std::ifstream is(dir / "model.json");
  if (!is) throw IoError("missing checkpoint file " + (dir / "model.json").string());
  try {
    auto meta = json::parse(is);
    if (meta.value("format", "") != kModelFormat) throw IoError("unsupported checkpoint format in " + dir.string());
    return meta;
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint metadata in " + dir.string() + ": " + e.what());
  }
}

}  // namespace

json read_model_extra(const fs::path& dir) { return read_meta(dir).value("extra", json::object()); }

template <typename T>
Model<T> load_model(const fs::path& dir) {
  const auto meta = read_meta(dir);
  const auto bin = dir / "params.bin";
  if (!fs::exists(bin)) throw IoError("missing checkpoint file " + bin.string());
  if (sha256_file(bin) != meta.at("params_sha256").get<std::string>())
    throw IoError("checkpoint " + dir.string() + " is corrupt: parameter hash mismatch");
  ModelConfig cfg;
  try {
    cfg = meta.at("config").get<ModelConfig>();
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint config: " + std::string(e.what()));
  }
  Model<T> model(cfg);
  std::ifstream is(bin, std::ios::binary);
  for (auto& p : model.params()) {
    auto [name, t] = ad::read_tensor<T>(is);
    if (name != p.name || t.shape() != p.value.shape())
      throw IoError("checkpoint parameter '" + name + "' does not match layout entry '" + p.name + "'");
    auto dst = p.value.mutable_values();
    auto src = t.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> sinusoidal_encoding<float>(std::size_t, std::size_t);
template Tensor<double> sinusoidal_encoding<double>(std::size_t, std::size_t);
template void save_model<float>(const Model<float>&, const fs::path&, const json&);
template void save_model<double>(const Model<double>&, const fs::path&, const json&);
template Model<float> load_model<float>(const fs::path&);
template Model<double> load_model<double>(const fs::path&);

}  // namespace schedlab::model
