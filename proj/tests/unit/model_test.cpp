#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "schedlab/model/model.hpp"
#include "schedlab/objectives/losses.hpp"
#include "schedlab/util/error.hpp"

namespace fs = std::filesystem;
using namespace schedlab;
using namespace schedlab::model;

namespace {

Tensor<float> random_frames(std::size_t F, std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(F * T);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>::from({F, T}, std::move(v));
}

Tensor<float> random_tokens(std::size_t n, std::size_t D, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n * D);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>::from({n, D}, std::move(v));
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double l2(const Tensor<float>& t) {
  double s = 0;
  for (float v : t.values()) s += double(v) * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Frontend, ToyStrideArithmetic) {
  ModelConfig cfg;
  EXPECT_EQ(cfg.latent_length(40), 10u);
  EXPECT_EQ(cfg.latent_length(41), 11u);
  EXPECT_THROW(cfg.latent_length(1), InvalidArgument);
  EXPECT_EQ(cfg.latent_length(cfg.receptive_field()), 2u);
}

TEST(Frontend, OutputShape) {
  ModelConfig cfg;
  Model<float> m(cfg, 1);
  auto tape = Tape<float>::inference();
  auto z = m.forward_frontend(tape, random_frames(cfg.feat_dim, 40, 2));
  EXPECT_EQ(z.shape(), (ad::Shape{cfg.d_z, 10}));
  EXPECT_THROW(m.forward_frontend(tape, random_frames(cfg.feat_dim, 1, 2)), InvalidArgument);
  EXPECT_THROW(m.forward_frontend(tape, random_frames(cfg.feat_dim + 1, 40, 2)), InvalidArgument);
}

TEST(SpanMask, SaturatedPolicyMasksEverything) {
  Rng rng(3);
  auto m = draw_span_mask(17, {1.0, 1}, rng);
  EXPECT_EQ(m.positions.size(), 17u);
  for (std::size_t i = 0; i < 17; ++i) EXPECT_EQ(m.positions[i], i);
}

TEST(SpanMask, ZeroProbabilityForcesOneSpan) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + rng.index(12);
    auto m = draw_span_mask(L, {0.0, 3}, rng);
    ASSERT_EQ(m.positions.size(), std::min<std::size_t>(3, L));
    for (std::size_t i = 1; i < m.positions.size(); ++i) EXPECT_EQ(m.positions[i], m.positions[i - 1] + 1);
    EXPECT_LT(m.positions.back(), L);
  }
}

TEST(SpanMask, MaskedFractionMatchesMonteCarlo) {
  // Independent simulation of the policy with a different generator.
  const std::size_t L = 50, n = 10000;
  const MaskPolicy policy{0.15, 3};
  std::mt19937 gen(123);
  std::bernoulli_distribution start(policy.p_start);
  std::uniform_int_distribution<std::size_t> forced(0, L - policy.span);
  double ref = 0;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<bool> masked(L, false);
    bool any = false;
    for (std::size_t t = 0; t < L; ++t)
      if (start(gen)) {
        any = true;
        for (std::size_t k = t; k < std::min(L, t + policy.span); ++k) masked[k] = true;
      }
    if (!any)
      for (std::size_t k = forced(gen), e = k + policy.span; k < e; ++k) masked[k] = true;
    ref += static_cast<double>(std::count(masked.begin(), masked.end(), true)) / L;
  }
  ref /= n;

  Rng rng(5);
  double got = 0;
  for (std::size_t s = 0; s < n; ++s) got += static_cast<double>(draw_span_mask(L, policy, rng).positions.size()) / L;
  got /= n;
  EXPECT_NEAR(got, ref, 0.02);
  // Closed form away from edges: 1 - (1 - p)^M.
  EXPECT_NEAR(ref, 1 - std::pow(0.85, 3), 0.02);
}

TEST(Ssl, OutputShapes) {
  ModelConfig cfg;
  Model<float> m(cfg, 6);
  Rng rng(7);
  auto tape = Tape<float>::inference();
  auto out = m.forward_ssl(tape, random_frames(cfg.feat_dim, 60, 8), rng, {});
  const std::size_t T_z = cfg.latent_length(60);
  const std::size_t M = out.mask.positions.size();
  ASSERT_GT(M, 0u);
  EXPECT_EQ(out.context.shape(), (ad::Shape{M, cfg.proj_dim}));
  EXPECT_EQ(out.targets.shape(), (ad::Shape{T_z, cfg.proj_dim}));
  EXPECT_EQ(out.code_probs.shape(), (ad::Shape{M, cfg.codebook.groups * cfg.codebook.entries}));
  EXPECT_EQ(out.layers.size(), cfg.ssl_layers());
  for (const auto& l : out.layers) EXPECT_EQ(l.shape(), (ad::Shape{T_z, cfg.d_model}));
}

TEST(Ssl, ForcedSpanLength) {
  ModelConfig cfg;
  cfg.mask = {0.0, 3};
  Model<float> m(cfg, 9);
  Rng rng(10);
  auto tape = Tape<float>::inference();
  for (std::size_t T : {8u, 20u, 60u}) {
    auto out = m.forward_ssl(tape, random_frames(cfg.feat_dim, T, T), rng, {});
    EXPECT_EQ(out.mask.positions.size(), std::min<std::size_t>(3, cfg.latent_length(T)));
  }
}

TEST(Ssl, TargetsIgnoreMask) {
  ModelConfig cfg;
  Model<float> m(cfg, 11);
  auto frames = random_frames(cfg.feat_dim, 48, 12);
  auto tape = Tape<float>::inference();
  auto a = m.forward_ssl(tape, frames, MaskSpec{{0, 1, 2}, 12}, {});
  auto b = m.forward_ssl(tape, frames, MaskSpec{{5, 6, 7, 8}, 12}, {});
  EXPECT_TRUE(same_values(a.targets, b.targets));
}

TEST(Ssl, ZeroProjectionsGiveUniformContrastiveLoss) {
  ModelConfig cfg;
  Model<float> m(cfg, 13);
  for (const char* name : {"ssl.proj_c.w", "ssl.proj_c.b", "ssl.proj_q.w", "ssl.proj_q.b"}) {
    auto v = m.param(name).mutable_values();
    std::fill(v.begin(), v.end(), 0.0f);
  }
  auto tape = Tape<float>::inference();
  MaskSpec mask;
  mask.length = 50;
  for (std::size_t i = 0; i < 20; ++i) mask.positions.push_back(2 * i);
  auto out = m.forward_ssl(tape, random_frames(cfg.feat_dim, 200, 14), mask, {});
  Rng rng(15);
  const std::size_t K = 10;
  auto plan = objectives::sample_distractors(mask.positions, mask.length, K, rng);
  ASSERT_EQ(plan.width, K + 1);
  auto loss = objectives::loss_aud_contrastive(tape, out.context, out.targets, plan, 0.1);
  EXPECT_NEAR(loss.item(), std::log(1.0 + K), 1e-5);
}

TEST(Vgs, EmbeddingsAreUnitNorm) {
  ModelConfig cfg;
  Model<float> m(cfg, 16);
  auto tape = Tape<float>::inference();
  for (std::size_t T : {28u, 64u, 101u}) {
    auto out = m.forward_vgs(tape, random_frames(cfg.feat_dim, T, T), random_tokens(1 + T % 4, 16, T), {});
    EXPECT_EQ(out.audio.shape(), (ad::Shape{1, cfg.emb_dim}));
    EXPECT_EQ(out.image.shape(), (ad::Shape{1, cfg.emb_dim}));
    EXPECT_NEAR(l2(out.audio), 1.0, 1e-6);
    EXPECT_NEAR(l2(out.image), 1.0, 1e-6);
  }
}

TEST(Vgs, ImageEmbeddingIsPermutationInvariant) {
  ModelConfig cfg;
  Model<float> m(cfg, 17);
  const std::size_t n = 4, D = cfg.image_token_dim;
  auto tokens = random_tokens(n, D, 18);
  std::vector<float> perm(n * D);
  const std::size_t order[] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(tokens.values().begin() + order[i] * D, D, perm.begin() + i * D);
  auto tape = Tape<float>::inference();
  auto a = m.image_embedding(tape, tokens, {});
  auto b = m.image_embedding(tape, Tensor<float>::from({n, D}, std::move(perm)), {});
  for (std::size_t k = 0; k < cfg.emb_dim; ++k) EXPECT_NEAR(a.values()[k], b.values()[k], 1e-6);
}

TEST(Vgs, DropoutOnlyInTrainMode) {
  ModelConfig cfg;
  Model<float> m(cfg, 19);
  auto frames = random_frames(cfg.feat_dim, 40, 20);
  auto tape = Tape<float>::inference();
  Rng r1(1), r2(2);
  auto eval_a = m.audio_embedding(tape, frames, {});
  auto eval_b = m.audio_embedding(tape, frames, {});
  EXPECT_TRUE(same_values(eval_a, eval_b));
  auto train_a = m.audio_embedding(tape, frames, {true, &r1, {}});
  auto train_b = m.audio_embedding(tape, frames, {true, &r2, {}});
  EXPECT_FALSE(same_values(train_a, train_b));
}

TEST(LayerFeatures, EncoderTopFeedsVgsBranch) {
  ModelConfig cfg;
  Model<float> m(cfg, 21);
  auto frames = random_frames(cfg.feat_dim, 52, 22);
  auto tape = Tape<float>::inference();
  auto encoded = m.encode(tape, m.latent(tape, frames), {});
  ASSERT_EQ(encoded.size(), cfg.enc_layers);
  EXPECT_TRUE(same_values(m.extract_layer_features(frames, cfg.enc_layers), encoded.back()));
  auto via_features = m.vgs_audio(tape, m.extract_layer_features(frames, cfg.enc_layers), {});
  EXPECT_TRUE(same_values(via_features, m.audio_embedding(tape, frames, {})));
}

TEST(LayerFeatures, BoundsAndFrameCounts) {
  ModelConfig cfg;
  Model<float> m(cfg, 23);
  auto frames = random_frames(cfg.feat_dim, 37, 24);
  const std::size_t T_z = cfg.latent_length(37);
  auto all = m.extract_all_layers(frames);
  ASSERT_EQ(all.size(), cfg.ssl_layers());
  for (std::size_t l = 1; l <= cfg.ssl_layers(); ++l) {
    auto f = m.extract_layer_features(frames, l);
    EXPECT_EQ(f.shape(), (ad::Shape{T_z, cfg.d_model}));
    EXPECT_TRUE(same_values(f, all[l - 1]));
  }
  EXPECT_THROW(m.extract_layer_features(frames, 0), InvalidArgument);
  EXPECT_THROW(m.extract_layer_features(frames, cfg.ssl_layers() + 1), InvalidArgument);
}

TEST(Layout, PaperPresetHasTwelveLayersOf768) {
  auto cfg = preset("paper");
  EXPECT_EQ(cfg.ssl_layers(), 12u);
  EXPECT_EQ(cfg.d_model, 768u);
  std::size_t stream_layers = 0;
  for (const auto& p : param_layout(cfg)) {
    const bool enc = p.name.rfind("encoder.layer", 0) == 0, dec = p.name.rfind("decoder.layer", 0) == 0;
    if ((enc || dec) && p.name.ends_with(".attn.wq")) {
      ++stream_layers;
      EXPECT_EQ(p.shape, (ad::Shape{768, 768}));
    }
  }
  EXPECT_EQ(stream_layers, 12u);
}

TEST(Layout, GroupsPartitionParameters) {
  for (const char* name : {"toy", "paper"}) {
    auto layout = param_layout(preset(name));
    std::set<std::string> names;
    std::map<ParamGroup, std::size_t> per_group;
    for (const auto& p : layout) {
      EXPECT_TRUE(names.insert(p.name).second) << p.name;
      ++per_group[p.group];
      const auto prefix = p.name.substr(0, p.name.find('.'));
      if (prefix == "frontend" || prefix == "encoder") EXPECT_EQ(p.group, ParamGroup::shared) << p.name;
      if (prefix == "image") EXPECT_EQ(p.group, ParamGroup::image_only) << p.name;
      if (prefix == "vgs") EXPECT_EQ(p.group, ParamGroup::vgs_audio_only) << p.name;
      if (prefix == "ssl" || prefix == "quantizer" || prefix == "decoder") EXPECT_EQ(p.group, ParamGroup::ssl_only);
    }
    EXPECT_EQ(per_group.size(), 4u);
    std::size_t total = 0;
    for (auto [g, n] : per_group) total += n;
    EXPECT_EQ(total, layout.size());
  }
  ModelConfig cfg;
  Model<float> m(cfg, 25);
  EXPECT_EQ(m.params().size(), param_layout(cfg).size());
  for (const auto& p : m.params()) EXPECT_TRUE(p.value.requires_grad()) << p.name;
}

TEST(Init, DeterministicPerSeed) {
  ModelConfig cfg;
  EXPECT_EQ(Model<float>(cfg, 1).hash(), Model<float>(cfg, 1).hash());
  EXPECT_NE(Model<float>(cfg, 1).hash(), Model<float>(cfg, 2).hash());
  Model<float> m(cfg, 3);
  for (float v : m.param("encoder.layer0.ln1.gamma").values()) EXPECT_EQ(v, 1.0f);
  for (float v : m.param("encoder.layer0.attn.bq").values()) EXPECT_EQ(v, 0.0f);
}

TEST(Config, JsonRoundTripAndStrictKeys) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.heads = 2;
  nlohmann::json j = cfg;
  auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  j["bogus"] = 1;
  try {
    (void)j.get<ModelConfig>();
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  auto paper = nlohmann::json{{"preset", "paper"}}.get<ModelConfig>();
  EXPECT_EQ(paper.d_model, 768u);
  ModelConfig bad;
  bad.heads = 5;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  EXPECT_THROW(preset("huge"), InvalidArgument);
}

TEST(Serialization, ReloadReproducesForwardBitExactly) {
  ModelConfig cfg;
  Model<float> m(cfg, 26);
  auto dir = fs::temp_directory_path() / "schedlab_model_roundtrip";
  fs::remove_all(dir);
  save_model(m, dir, {{"epoch", 7}});
  auto back = load_model<float>(dir);
  EXPECT_EQ(back.hash(), m.hash());
  EXPECT_EQ(read_model_extra(dir).at("epoch"), 7);
  auto frames = random_frames(cfg.feat_dim, 45, 27);
  auto tokens = random_tokens(3, cfg.image_token_dim, 28);
  auto tape = Tape<float>::inference();
  auto a = m.forward_vgs(tape, frames, tokens, {});
  auto b = back.forward_vgs(tape, frames, tokens, {});
  EXPECT_TRUE(same_values(a.audio, b.audio));
  EXPECT_TRUE(same_values(a.image, b.image));
  const MaskSpec mask{{1, 2, 3}, cfg.latent_length(45)};
  auto sa = m.forward_ssl(tape, frames, mask, {});
  auto sb = back.forward_ssl(tape, frames, mask, {});
  EXPECT_TRUE(same_values(sa.context, sb.context));
  EXPECT_TRUE(same_values(sa.targets, sb.targets));
}

TEST(Serialization, CorruptParametersRejected) {
  ModelConfig cfg;
  Model<float> m(cfg, 29);
  auto dir = fs::temp_directory_path() / "schedlab_model_corrupt";
  fs::remove_all(dir);
  save_model(m, dir);
  {
    std::fstream f(dir / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(fs::file_size(dir / "params.bin") / 2));
    f.put('\x5a');
  }
  EXPECT_THROW(load_model<float>(dir), IoError);
  EXPECT_THROW(load_model<float>(dir / "missing"), IoError);
}
