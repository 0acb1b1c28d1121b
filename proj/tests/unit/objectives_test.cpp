#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "schedlab/corpus/corpus.hpp"
#include "schedlab/model/model.hpp"
#include "schedlab/objectives/losses.hpp"
#include "schedlab/trainer/trainer.hpp"
#include "schedlab/util/error.hpp"

using namespace schedlab;
using namespace schedlab::objectives;
using schedlab::testing::grad_check;
using schedlab::testing::random_tensor;
using schedlab::testing::brute_force_av;
using schedlab::testing::unit_rows;

namespace {

double av_value(const Tensor<double>& a, const Tensor<double>& v, std::span<const std::uint8_t> dup, double tau) {
  auto tape = Tape<double>::inference();
  return loss_av(tape, a, v, dup, tau).item();
}

Tensor<double> rows(std::initializer_list<std::initializer_list<double>> r) {
  std::vector<double> v;
  std::size_t cols = 0;
  for (const auto& row : r) {
    cols = row.size();
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor<double>::from({r.size(), cols}, std::move(v));
}

}  // namespace

TEST(LossAv, SingleExampleIsZero) {
  Rng rng(1);
  auto a = unit_rows(1, 4, rng), v = unit_rows(1, 4, rng);
  EXPECT_EQ(av_value(a, v, {}, 0.07), 0.0);
}

TEST(LossAv, TwoByTwoHandValue) {
  auto e = rows({{1, 0}, {0, 1}});
  EXPECT_NEAR(av_value(e, e, {}, 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
  EXPECT_NEAR(av_value(e, e, {}, 1.0), 0.3133, 1e-4);
}

TEST(LossAv, UniformSimilaritiesGiveLogB) {
  auto same = rows({{1, 0}, {1, 0}, {1, 0}, {1, 0}});
  EXPECT_NEAR(av_value(same, same, {}, 0.07), std::log(4.0), 1e-12);
}

TEST(LossAv, DuplicatesLeaveTheNegativeSet) {
  auto same = rows({{1, 0}, {1, 0}, {1, 0}});
  const std::uint32_t ids[] = {5, 5, 9};
  auto dup = duplicate_mask(ids);
  // Rows 0 and 1 see 2 candidates, row 2 sees all 3.
  EXPECT_NEAR(av_value(same, same, dup, 0.1), (2 * std::log(2.0) + std::log(3.0)) / 3, 1e-12);
}

TEST(LossAv, MatchesBruteForceForSmallBatches) {
  Rng rng(2);
  for (std::size_t b = 1; b <= 4; ++b)
    for (int trial = 0; trial < 25; ++trial) {
      auto a = unit_rows(b, 5, rng), v = unit_rows(b, 5, rng);
      std::vector<std::uint32_t> ids(b);
      for (auto& id : ids) id = static_cast<std::uint32_t>(rng.index(3));
      auto dup = duplicate_mask(ids);
      const double tau = 0.05 + rng.uniform();
      EXPECT_NEAR(av_value(a, v, dup, tau), brute_force_av(a, v, dup, tau), 1e-10);
    }
}

TEST(LossAv, OrthogonalInvariance) {
  Rng rng(3);
  const std::size_t b = 6, e = 5;
  auto a = unit_rows(b, e, rng), v = unit_rows(b, e, rng);
  Eigen::MatrixXd g(e, e);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  auto rotate = [&](const Tensor<double>& t) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(t.values().data(), b, e);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m * q;
    return Tensor<double>::from({b, e}, std::vector<double>(r.data(), r.data() + r.size()));
  };
  const std::uint32_t ids[] = {0, 0, 1, 2, 2, 2};
  auto dup = duplicate_mask(ids);
  EXPECT_NEAR(av_value(a, v, dup, 0.07), av_value(rotate(a), rotate(v), dup, 0.07), 1e-6);
}

TEST(LossAv, RejectsBadInputs) {
  auto e = rows({{1, 0}, {0, 1}});
  auto big = rows({{2, 0}, {0, 1}});
  EXPECT_THROW(av_value(big, e, {}, 1.0), InvalidArgument);
  EXPECT_THROW(av_value(Tensor<double>::from({0, 2}, {}), Tensor<double>::from({0, 2}, {}), {}, 1.0),
               InvalidArgument);
  EXPECT_THROW(av_value(e, e, {}, 0.0), InvalidArgument);
}

TEST(LossAv, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  auto a = unit_rows(4, 6, rng), v = unit_rows(4, 6, rng);
  const std::uint32_t ids[] = {1, 1, 2, 3};
  const auto dup = duplicate_mask(ids);
  // Normalizing inside the function keeps perturbed inputs on the sphere.
  auto res = grad_check(
      [&](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        return loss_av(t, ad::ops::l2_normalize_rows(t, in[0]), ad::ops::l2_normalize_rows(t, in[1]),
                       std::span<const std::uint8_t>(dup), 0.07);
      },
      {a, v});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(LossAudR, HandValues) {
  auto tape = Tape<double>::inference();
  DistractorPlan plan{{0, 1}, 2};
  auto c = rows({{1, 0}});
  auto q = rows({{1, 0}, {0, 1}});
  EXPECT_NEAR(loss_aud_contrastive(tape, c, q, plan, 1.0).item(), 0.3133, 1e-4);
  // c orthogonal to its target; the distractor equals c.
  auto c2 = rows({{0, 1}});
  EXPECT_NEAR(loss_aud_contrastive(tape, c2, q, plan, 1.0).item(), -std::log(1.0 / (1.0 + std::exp(1.0))), 1e-12);
  EXPECT_NEAR(loss_aud_contrastive(tape, c2, q, plan, 1.0).item(), 1.3133, 1e-4);
}

TEST(LossAudR, NoDistractorsIsZero) {
  Rng rng(5);
  const std::size_t masked[] = {1, 3, 4};
  auto plan = sample_distractors(masked, 6, 0, rng);
  EXPECT_EQ(plan.width, 1u);
  auto tape = Tape<double>::inference();
  auto c = random_tensor({3, 4}, rng), q = random_tensor({6, 4}, rng);
  EXPECT_EQ(loss_aud_contrastive(tape, c, q, plan, 0.1).item(), 0.0);
}

TEST(Distractors, DrawnFromOtherMaskedPositions) {
  Rng rng(6);
  const std::size_t masked[] = {2, 3, 4, 9, 10, 11, 15};
  auto plan = sample_distractors(masked, 20, 4, rng);
  ASSERT_EQ(plan.width, 5u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(plan.index[i * 5], masked[i]);
    std::set<std::size_t> seen;
    for (std::size_t j = 1; j < 5; ++j) {
      const auto d = plan.index[i * 5 + j];
      EXPECT_NE(d, masked[i]);
      EXPECT_TRUE(std::find(std::begin(masked), std::end(masked), d) != std::end(masked));
      EXPECT_TRUE(seen.insert(d).second);
    }
  }
  // Fewer available than requested: every other masked position is used.
  auto small = sample_distractors(std::span<const std::size_t>(masked, 3), 20, 10, rng);
  EXPECT_EQ(small.width, 3u);
}

TEST(Distractors, SingleMaskedPositionFallsBackToUnmasked) {
  Rng rng(7);
  const std::size_t masked[] = {3};
  auto plan = sample_distractors(masked, 8, 10, rng);
  EXPECT_EQ(plan.width, 8u);
  std::set<std::size_t> used(plan.index.begin() + 1, plan.index.end());
  EXPECT_EQ(used.size(), 7u);
  EXPECT_FALSE(used.count(3));
  EXPECT_THROW(sample_distractors(std::span<const std::size_t>{}, 8, 10, rng), InvalidArgument);
}

TEST(LossAudR, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  const std::size_t masked[] = {0, 2, 3, 6};
  auto plan = sample_distractors(masked, 8, 2, rng);
  auto c = random_tensor({4, 5}, rng), q = random_tensor({8, 5}, rng);
  auto res = grad_check(
      [&](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        return loss_aud_contrastive(t, in[0], in[1], plan, 0.1);
      },
      {c, q});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(LossAudD, UniformIsZeroAndOneHotIsThreeQuarters) {
  auto tape = Tape<double>::inference();
  auto uniform = Tensor<double>::from({3, 8}, std::vector<double>(24, 0.25));
  EXPECT_NEAR(loss_aud_diversity(tape, uniform, 2, 4).item(), 0.0, 1e-12);
  auto onehot = rows({{1, 0, 0, 0, 0, 0, 1, 0}, {1, 0, 0, 0, 0, 0, 1, 0}});
  EXPECT_NEAR(loss_aud_diversity(tape, onehot, 2, 4).item(), 0.75, 1e-12);
}

TEST(LossAudD, BoundedAndValidated) {
  Rng rng(9);
  auto tape = Tape<double>::inference();
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t G = 1 + rng.index(3), V = 2 + rng.index(6), N = 1 + rng.index(5);
    std::vector<double> p(N * G * V);
    for (std::size_t r = 0; r < N * G; ++r) {
      double s = 0;
      for (std::size_t v = 0; v < V; ++v) s += (p[r * V + v] = std::pow(rng.uniform(), 4));
      for (std::size_t v = 0; v < V; ++v) p[r * V + v] /= s;
    }
    const double d = loss_aud_diversity(tape, Tensor<double>::from({N, G * V}, std::move(p)), G, V).item();
    EXPECT_GE(d, -1e-12);
    EXPECT_LE(d, (V - 1.0) / V + 1e-12);
  }
  auto bad = rows({{0.5, 0.4, 0.5, 0.5}});
  EXPECT_THROW(loss_aud_diversity(tape, bad, 2, 2), InvalidArgument);
}

TEST(LossAudD, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto logits = random_tensor({5, 8}, rng);
  auto res = grad_check(
      [](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        // Per-group softmax keeps probabilities valid under perturbation.
        auto g = ad::ops::reshape(t, in[0], {10, 4});
        return loss_aud_diversity(t, ad::ops::reshape(t, ad::ops::softmax_rows(t, g), {5, 8}), 2, 4);
      },
      {logits});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Combined, HandExample) {
  EXPECT_EQ(combined_value<double>(0.5, 2.0, 1.0, 0.0), 1.5);
  auto tape = Tape<double>::inference();
  auto av = Tensor<double>::scalar(2.0), r = Tensor<double>::scalar(1.0), d = Tensor<double>::scalar(0.0);
  EXPECT_EQ(combined_loss(tape, 0.5, &av, &r, &d).item(), 1.5);
}

TEST(Combined, TapedValueMatchesFormulaBitExactly) {
  Rng rng(11);
  for (double alpha : {0.0, 0.25, 0.5, 1.0})
    for (int trial = 0; trial < 20; ++trial) {
      const float av = static_cast<float>(3 * rng.uniform()), r = static_cast<float>(3 * rng.uniform()),
                  d = static_cast<float>(rng.uniform());
      auto tape = Tape<float>::inference();
      auto tav = Tensor<float>::scalar(av), tr = Tensor<float>::scalar(r), td = Tensor<float>::scalar(d);
      const float taped = combined_loss(tape, alpha, &tav, &tr, &td).item();
      const float direct = static_cast<float>(alpha) * av + static_cast<float>(1.0 - alpha) * (r + 0.1f * d);
      EXPECT_EQ(taped, direct);
      EXPECT_EQ(combined_value<float>(alpha, av, r, d), direct);
      EXPECT_EQ(make_report<float>(alpha, av, r, d).combined, static_cast<double>(direct));
    }
}

TEST(Combined, LinearInAlpha) {
  const double av = 1.7, r = 0.9, d = 0.3;
  const double at0 = combined_value(0.0, av, r, d), at1 = combined_value(1.0, av, r, d);
  for (double alpha : {0.25, 0.5}) EXPECT_NEAR(combined_value(alpha, av, r, d), at0 + alpha * (at1 - at0), 1e-15);
  EXPECT_EQ(at0, r + 0.1 * d);
  EXPECT_EQ(at1, av);
}

TEST(Combined, RejectsBadAlphaAndMissingTerms) {
  auto tape = Tape<double>::inference();
  auto x = Tensor<double>::scalar(1.0);
  EXPECT_THROW(combined_loss(tape, -0.1, &x, &x, &x), InvalidArgument);
  EXPECT_THROW(combined_loss(tape, 1.5, &x, &x, &x), InvalidArgument);
  EXPECT_THROW(combined_loss<double>(tape, 0.5, nullptr, &x, &x), InvalidArgument);
  EXPECT_THROW(combined_loss<double>(tape, 0.5, &x, nullptr, &x), InvalidArgument);
  EXPECT_NO_THROW(combined_loss<double>(tape, 1.0, &x, nullptr, nullptr));
  EXPECT_NO_THROW(combined_loss<double>(tape, 0.0, nullptr, &x, &x));
  LossConfig c;
  c.alpha = 2;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

namespace {

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.d_z = 8;
  c.d_model = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.proj_dim = 8;
  c.codebook = {2, 4, 8, 0.5, true};
  c.vgs_audio_layers = 1;
  c.image_layers = 1;
  c.emb_dim = 8;
  return c;
}

corpus::Corpus small_corpus() {
  corpus::CorpusSpec s;
  s.n_train_images = 4;
  s.n_test_images = 1;
  s.domain_a.n_speakers = 2;
  return corpus::generate_corpus(s, 3);
}

}  // namespace

TEST(Combined, AlphaDecouplesParameterGroups) {
  auto corpus = small_corpus();
  model::Model<double> m(small_model(), 4);
  const std::uint32_t batch[] = {0, 1, 5, 6};
  for (double alpha : {0.0, 1.0}) {
    Tape<double> tape;
    Rng rng(5);
    const model::ForwardContext ctx{true, &rng, {}};
    auto out = trainer::batch_loss(tape, m, corpus, batch, alpha, {}, ctx, rng);
    for (auto& p : m.params()) p.value.zero_grad();
    tape.backward(out.total);
    for (const auto& p : m.params()) {
      const bool frozen = alpha == 1.0 ? p.group == model::ParamGroup::ssl_only
                                       : p.group == model::ParamGroup::image_only ||
                                             p.group == model::ParamGroup::vgs_audio_only;
      if (!frozen) continue;
      for (double g : p.value.grad()) ASSERT_EQ(g, 0.0) << p.name << " alpha=" << alpha;
    }
    EXPECT_EQ(out.av.has_value(), alpha > 0.0);
    EXPECT_EQ(out.r.has_value(), alpha < 1.0);
  }
}

// Central differences at h = 1e-5 carry ~1e-11 absolute round-off on an O(1)
// loss, so relative errors are measured against at least 1e-6.
constexpr double kFdNoiseFloor = 1e-6;

TEST(Combined, FullStepGradientMatchesFiniteDifferences) {
  auto corpus = small_corpus();
  model::Model<double> m(small_model(), 6);
  const std::uint32_t batch[] = {0, 2, 7};
  std::vector<Tensor<double>> inputs;
  for (const auto& p : m.params()) inputs.push_back(p.value.detach());
  // Soft codes: the straight-through forward is piecewise constant.
  auto res = grad_check(
      [&](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        for (std::size_t i = 0; i < in.size(); ++i) m.params()[i].value = in[i];
        Rng rng(7);
        const model::ForwardContext ctx{true, &rng, false};
        return trainer::batch_loss(t, m, corpus, batch, 0.5, {}, ctx, rng).total;
      },
      inputs, 1e-5, 6, kFdNoiseFloor);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_analytic << " vs " << res.worst_numeric;
  EXPECT_GT(res.checked, 300u);
}
