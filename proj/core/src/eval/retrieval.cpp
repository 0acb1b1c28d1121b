#include "schedlab/eval/retrieval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "schedlab/trainer/trainer.hpp"
#include "schedlab/util/error.hpp"
#include "schedlab/util/parallel.hpp"

namespace schedlab::eval {
namespace fs = std::filesystem;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix normalized(const EmbeddingSet& e) {
  RowMatrix m(e.n, e.dim);
  for (std::size_t i = 0; i < e.n; ++i) {
    double n2 = 0;
    for (std::size_t k = 0; k < e.dim; ++k) {
      m(i, k) = e.values[i * e.dim + k];
      n2 += m(i, k) * m(i, k);
    }
    if (n2 > 0) m.row(i) /= std::sqrt(n2);
  }
  return m;
}

/// Rank of candidate `target` within `scores` (0 = best), ties broken by index.
std::size_t rank_of(const double* scores, std::size_t n, std::size_t target) {
  const double s = scores[target];
  std::size_t r = 0;
  for (std::size_t j = 0; j < n; ++j)
    if (scores[j] > s || (scores[j] == s && j < target)) ++r;
  return r;
}

constexpr std::size_t kBlock = 256;

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RetrievalResult recall_at_k(const EmbeddingSet& audio, const EmbeddingSet& images,
                            std::span<const std::uint32_t> caption_image, std::span<const std::size_t> ks) {
  if (audio.n == 0 || images.n == 0) throw InvalidArgument("recall@k: empty embedding set");
  if (audio.dim != images.dim) throw InvalidArgument("recall@k: audio and image dims differ");
  if (caption_image.size() != audio.n) throw InvalidArgument("recall@k: one image index per caption required");
  if (ks.empty()) throw InvalidArgument("recall@k: no k requested");
  for (auto k : ks)
    if (k < 1) throw InvalidArgument("recall@k: k must be >= 1");
  for (auto i : caption_image)
    if (i >= images.n) throw InvalidArgument("recall@k: caption paired with unknown image");

  const RowMatrix a = normalized(audio), v = normalized(images);
  std::vector<std::size_t> s2i_rank(audio.n);
  std::vector<std::size_t> i2s_rank(images.n, std::numeric_limits<std::size_t>::max());

  for (std::size_t q0 = 0; q0 < audio.n; q0 += kBlock) {
    const std::size_t nq = std::min(kBlock, audio.n - q0);
    RowMatrix s = a.middleRows(q0, nq) * v.transpose();
    for (std::size_t i = 0; i < nq; ++i) s2i_rank[q0 + i] = rank_of(s.row(i).data(), images.n, caption_image[q0 + i]);
  }
  std::vector<std::vector<std::size_t>> captions_of(images.n);
  for (std::size_t c = 0; c < audio.n; ++c) captions_of[caption_image[c]].push_back(c);
  for (std::size_t q0 = 0; q0 < images.n; q0 += kBlock) {
    const std::size_t nq = std::min(kBlock, images.n - q0);
    RowMatrix s = v.middleRows(q0, nq) * a.transpose();
    for (std::size_t i = 0; i < nq; ++i)
      for (auto c : captions_of[q0 + i]) i2s_rank[q0 + i] = std::min(i2s_rank[q0 + i], rank_of(s.row(i).data(), audio.n, c));
  }

  RetrievalResult r;
  r.n_captions = audio.n;
  r.n_images = images.n;
  std::size_t queried_images = 0;
  for (const auto& c : captions_of) queried_images += c.empty() ? 0 : 1;
  for (auto k : ks) {
    std::size_t hits = 0;
    for (auto rank : s2i_rank) hits += rank < k;
    r.speech_to_image[k] = static_cast<double>(hits) / static_cast<double>(audio.n);
    hits = 0;
    for (std::size_t j = 0; j < images.n; ++j) hits += !captions_of[j].empty() && i2s_rank[j] < k;
    r.image_to_speech[k] = static_cast<double>(hits) / static_cast<double>(queried_images);
  }
  return r;
}

PairedEmbeddings embed_split(const model::Model<float>& model, const corpus::Corpus& corpus,
                             std::span<const std::uint32_t> image_ids) {
  const auto& cfg = model.config();
  const auto caps = corpus.captions_by_image();
  PairedEmbeddings out;
  std::vector<std::uint32_t> utts;
  for (std::size_t row = 0; row < image_ids.size(); ++row)
    for (auto c : caps.at(image_ids[row])) {
      utts.push_back(c);
      out.caption_image.push_back(static_cast<std::uint32_t>(row));
    }
  const std::size_t e = cfg.emb_dim;
  out.audio = {std::vector<float>(utts.size() * e), utts.size(), e};
  out.images = {std::vector<float>(image_ids.size() * e), image_ids.size(), e};
  model::ForwardContext ctx;
  parallel_for(utts.size() + image_ids.size(), [&](std::size_t i) {
    auto tape = ad::Tape<float>::inference();
    if (i < utts.size()) {
      auto emb = model.audio_embedding(tape, trainer::frames_tensor(corpus.utterances[utts[i]], cfg.feat_dim), ctx);
      std::copy(emb.values().begin(), emb.values().end(), out.audio.values.begin() + static_cast<std::ptrdiff_t>(i * e));
    } else {
      const std::size_t j = i - utts.size();
      auto emb = model.image_embedding(tape, trainer::tokens_tensor(corpus.scenes.at(image_ids[j]), cfg.image_token_dim), ctx);
      std::copy(emb.values().begin(), emb.values().end(), out.images.values.begin() + static_cast<std::ptrdiff_t>(j * e));
    }
  });
  return out;
}

RetrievalResult evaluate_retrieval(const model::Model<float>& model, const corpus::Corpus& corpus,
                                   std::span<const std::size_t> ks) {
  if (corpus.test_images.empty()) throw InvalidArgument("retrieval: corpus has no test images");
  auto emb = embed_split(model, corpus, corpus.test_images);
  return recall_at_k(emb.audio, emb.images, emb.caption_image, ks);
}

namespace {

std::size_t total_stride(const model::ModelConfig& cfg) {
  std::size_t s = 1;
  for (const auto& l : cfg.frontend) s *= l.stride;
  return s;
}

Segment make_segment(const std::vector<float>& frames, std::size_t length, std::size_t dim, std::size_t begin,
                     std::size_t end, const corpus::PhoneSpan& span, std::uint32_t speaker) {
  Segment seg;
  seg.dim = dim;
  seg.phone = span.phone;
  seg.speaker = speaker;
  begin = std::min(begin, length - 1);
  end = std::clamp(end, begin + 1, length);
  seg.n_frames = end - begin;
  seg.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(begin * dim),
                    frames.begin() + static_cast<std::ptrdiff_t>(end * dim));
  return seg;
}

}  // namespace

std::vector<std::vector<Segment>> layer_segments(const model::Model<float>& model, const corpus::Corpus& corpus,
                                                 std::span<const std::size_t> layers) {
  const auto& cfg = model.config();
  for (auto l : layers)
    if (l < 1 || l > cfg.ssl_layers())
      throw InvalidArgument("layer " + std::to_string(l) + " out of range [1, " + std::to_string(cfg.ssl_layers()) + "]");
  const std::size_t stride = total_stride(cfg);
  std::vector<std::vector<std::vector<Segment>>> per_utt(corpus.utterances.size());
  parallel_for(corpus.utterances.size(), [&](std::size_t u) {
    const auto& utt = corpus.utterances[u];
    auto feats = model.extract_all_layers(trainer::frames_tensor(utt, cfg.feat_dim));
    per_utt[u].resize(layers.size());
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& f = feats[layers[li] - 1];
      std::vector<float> values(f.values().begin(), f.values().end());
      for (const auto& span : utt.alignment) {
        per_utt[u][li].push_back(make_segment(values, f.dim(0), f.dim(1), span.start / stride,
                                              (span.end + stride - 1) / stride, span, utt.speaker));
      }
    }
  });
  std::vector<std::vector<Segment>> out(layers.size());
  for (auto& utt : per_utt)
    for (std::size_t li = 0; li < layers.size(); ++li)
      for (auto& s : utt[li]) out[li].push_back(std::move(s));
  return out;
}

std::vector<Segment> input_segments(const corpus::Corpus& corpus) {
  const std::size_t F = corpus.phones.feat_dim;
  std::vector<Segment> out;
  for (const auto& u : corpus.utterances) {
    std::vector<float> tmaj(u.n_frames * F);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < u.n_frames; ++t) tmaj[t * F + f] = u.frames[f * u.n_frames + t];
    for (const auto& span : u.alignment)
      out.push_back(make_segment(tmaj, u.n_frames, F, span.start, span.end, span, u.speaker));
  }
  return out;
}

std::vector<AbxRow> abx_layers(const model::Model<float>& model, const corpus::Corpus& abx_corpus,
                               std::span<const std::size_t> layers, const AbxOptions& options, std::size_t epoch) {
  auto segs = layer_segments(model, abx_corpus, layers);
  std::vector<AbxRow> rows;
  for (auto cond : options.conditions) {
    // Triplets depend only on labels, so every layer shares them.
    const auto triplets = make_triplets(segs.front(), cond, options.limits, options.seed);
    for (std::size_t li = 0; li < layers.size(); ++li)
      rows.push_back({layers[li], epoch, cond, abx_error(triplets, segs[li]), triplets.size()});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AbxRow& x, const AbxRow& y) { return x.layer < y.layer; });
  return rows;
}

std::vector<AbxRow> layer_sweep_abx(const fs::path& run_dir, const corpus::Corpus& abx_corpus,
                                    std::span<const std::size_t> layers, std::span<const std::size_t> epochs,
                                    const AbxOptions& options) {
  if (layers.empty() || epochs.empty()) throw InvalidArgument("layer sweep: no layers or epochs requested");
  for (auto e : epochs) {
    if (!fs::exists(trainer::checkpoint_dir(run_dir, e) / "model.json")) trainer::load_checkpoint(run_dir, e);
  }
  std::vector<AbxRow> rows;
  for (auto e : epochs) {
    auto model = trainer::load_checkpoint(run_dir, e);
    auto part = abx_layers(model, abx_corpus, layers, options, e);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

std::vector<AbxRow> best_layers(std::span<const AbxRow> rows) {
  std::map<std::pair<std::size_t, int>, AbxRow> best;
  for (const auto& r : rows) {
    const std::pair<std::size_t, int> key{r.epoch, static_cast<int>(r.condition)};
    auto it = best.find(key);
    if (it == best.end() || r.error < it->second.error || (r.error == it->second.error && r.layer < it->second.layer))
      best[key] = r;
  }
  std::vector<AbxRow> out;
  for (const auto& [k, r] : best) out.push_back(r);
  return out;
}

std::string abx_csv(std::span<const AbxRow> rows) {
  std::ostringstream os;
  os << "layer,epoch,condition,error,n_triplets\n";
  for (const auto& r : rows)
    os << r.layer << ',' << r.epoch << ',' << condition_name(r.condition) << ',' << num(r.error) << ',' << r.n_triplets
       << '\n';
  return os.str();
}

std::string retrieval_csv(const RetrievalResult& r) {
  std::ostringstream os;
  os << "direction,k,recall,n_queries,n_candidates\n";
  for (const auto& [k, v] : r.speech_to_image)
    os << "speech_to_image," << k << ',' << num(v) << ',' << r.n_captions << ',' << r.n_images << '\n';
  for (const auto& [k, v] : r.image_to_speech)
    os << "image_to_speech," << k << ',' << num(v) << ',' << r.n_images << ',' << r.n_captions << '\n';
  return os.str();
}

}  // namespace schedlab::eval
