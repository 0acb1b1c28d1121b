#include "schedlab/corpus/corpus.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "schedlab/autodiff/serialize.hpp"
#include "schedlab/util/error.hpp"
#include "schedlab/util/hash.hpp"
#include "schedlab/util/json_fields.hpp"

namespace schedlab::corpus {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Independent RNG streams so that each part of the corpus depends only on the
// seed, not on how much randomness an earlier part consumed.
enum Stream : std::uint64_t {
  kInventory = 1,
  kLexicon = 2,
  kSpeakers = 3,
  kObjects = 4,
  kScenes = 5,
  kCaptions = 6,
  kAbxUtterances = 7,
};

constexpr const char* kManifestFormat = "schedlab.corpus/1";

void read_domain(const json& j, const std::string& path, DomainSpec& s) {
  JsonFields f(j, path);
  f.opt("n_speakers", s.n_speakers)
      .opt("speaker_id_offset", s.speaker_id_offset)
      .opt("noise_sigma", s.noise_sigma)
      .opt("scale_min", s.scale_min)
      .opt("scale_max", s.scale_max)
      .opt("bias_scale", s.bias_scale)
      .finish();
}

void read_abx(const json& j, const std::string& path, AbxSpec& s) {
  JsonFields f(j, path);
  f.mark("domain")
      .opt("min_tokens_per_phone", s.min_tokens_per_phone)
      .opt("words_per_utterance", s.words_per_utterance)
      .finish();
  if (j.contains("domain")) read_domain(j.at("domain"), f.qualified("domain"), s.domain);
}

std::string domain_str(Domain d) { return std::string(1, static_cast<char>(d)); }

Domain parse_domain(const std::string& s) {
  if (s == "A") return Domain::A;
  if (s == "B") return Domain::B;
  throw IoError("unknown domain tag '" + s + "'");
}

std::vector<float> gaussian(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
  return v;
}

void check_spec(const CorpusSpec& spec) {
  if (spec.n_phones < 2) throw InvalidArgument("corpus: need at least two phones");
  if (spec.feat_dim == 0) throw InvalidArgument("corpus: feat_dim must be positive");
  if (spec.phone_len_min == 0 || spec.phone_len_min > spec.phone_len_max)
    throw InvalidArgument("corpus: invalid phone length range");
  if (spec.word_phones_min == 0 || spec.word_phones_min > spec.word_phones_max)
    throw InvalidArgument("corpus: invalid word length range");
  if (spec.objects_min == 0 || spec.objects_min > spec.objects_max)
    throw InvalidArgument("corpus: invalid objects-per-image range");
  if (spec.n_objects < spec.objects_max)
    throw InvalidArgument("corpus: vocabulary too small to name all objects (" +
                          std::to_string(spec.n_objects) + " object words, up to " +
                          std::to_string(spec.objects_max) + " objects per image)");
  if (spec.fillers_min > spec.fillers_max) throw InvalidArgument("corpus: invalid filler range");
  if (spec.fillers_max > 0 && spec.n_fillers == 0)
    throw InvalidArgument("corpus: captions need filler words but the filler vocabulary is empty");
  if (spec.captions_per_image == 0) throw InvalidArgument("corpus: captions_per_image must be positive");
}

std::size_t uniform_in(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

}  // namespace

// --- spec serialization ------------------------------------------------------

void to_json(json& j, const DomainSpec& s) {
  j = json{{"n_speakers", s.n_speakers}, {"speaker_id_offset", s.speaker_id_offset},
           {"noise_sigma", s.noise_sigma}, {"scale_min", s.scale_min},
           {"scale_max", s.scale_max},     {"bias_scale", s.bias_scale}};
}
void from_json(const json& j, DomainSpec& s) { read_domain(j, "", s); }

void to_json(json& j, const AbxSpec& s) {
  j = json{{"domain", s.domain},
           {"min_tokens_per_phone", s.min_tokens_per_phone},
           {"words_per_utterance", s.words_per_utterance}};
}
void from_json(const json& j, AbxSpec& s) { read_abx(j, "", s); }

void to_json(json& j, const CorpusSpec& s) {
  j = json{{"n_phones", s.n_phones},
           {"feat_dim", s.feat_dim},
           {"phone_len_min", s.phone_len_min},
           {"phone_len_max", s.phone_len_max},
           {"template_spread", s.template_spread},
           {"n_objects", s.n_objects},
           {"n_fillers", s.n_fillers},
           {"word_phones_min", s.word_phones_min},
           {"word_phones_max", s.word_phones_max},
           {"n_train_images", s.n_train_images},
           {"n_test_images", s.n_test_images},
           {"captions_per_image", s.captions_per_image},
           {"objects_min", s.objects_min},
           {"objects_max", s.objects_max},
           {"fillers_min", s.fillers_min},
           {"fillers_max", s.fillers_max},
           {"image_token_dim", s.image_token_dim},
           {"image_noise", s.image_noise},
           {"duration_jitter", s.duration_jitter},
           {"coarticulation", s.coarticulation},
           {"domain_a", s.domain_a},
           {"abx", s.abx}};
}

void from_json(const json& j, CorpusSpec& s) {
  JsonFields f(j, "");
  f.opt("n_phones", s.n_phones)
      .opt("feat_dim", s.feat_dim)
      .opt("phone_len_min", s.phone_len_min)
      .opt("phone_len_max", s.phone_len_max)
      .opt("template_spread", s.template_spread)
      .opt("n_objects", s.n_objects)
      .opt("n_fillers", s.n_fillers)
      .opt("word_phones_min", s.word_phones_min)
      .opt("word_phones_max", s.word_phones_max)
      .opt("n_train_images", s.n_train_images)
      .opt("n_test_images", s.n_test_images)
      .opt("captions_per_image", s.captions_per_image)
      .opt("objects_min", s.objects_min)
      .opt("objects_max", s.objects_max)
      .opt("fillers_min", s.fillers_min)
      .opt("fillers_max", s.fillers_max)
      .opt("image_token_dim", s.image_token_dim)
      .opt("image_noise", s.image_noise)
      .opt("duration_jitter", s.duration_jitter)
      .opt("coarticulation", s.coarticulation)
      .mark("domain_a")
      .mark("abx")
      .finish();
  if (j.contains("domain_a")) read_domain(j.at("domain_a"), "domain_a", s.domain_a);
  if (j.contains("abx")) read_abx(j.at("abx"), "abx", s.abx);
}

// --- generators ----------------------------------------------------------------

double Speaker::condition_number() const {
  const auto n = static_cast<Eigen::Index>(bias.size());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) a(r, c) = transform[static_cast<std::size_t>(r * n + c)];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  return s(0) / s(n - 1);
}

PhoneInventory make_inventory(const CorpusSpec& spec, std::uint64_t seed) {
  check_spec(spec);
  Rng rng(mix_seed({seed, kInventory}));
  const std::size_t F = spec.feat_dim;
  PhoneInventory inv;
  inv.feat_dim = F;
  for (std::size_t p = 0; p < spec.n_phones; ++p) {
    const std::size_t len = uniform_in(rng, spec.phone_len_min, spec.phone_len_max);
    const auto mean = gaussian(rng, F);
    std::vector<float> tpl(F * len);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < len; ++t)
        tpl[f * len + t] = mean[f] + static_cast<float>(spec.template_spread * rng.normal());
    inv.lengths.push_back(len);
    inv.templates.push_back(std::move(tpl));
  }
  for (std::size_t a = 0; a < inv.size(); ++a)
    for (std::size_t b = a + 1; b < inv.size(); ++b)
      if (inv.templates[a] == inv.templates[b]) throw Error("corpus: duplicate phone templates");
  return inv;
}

Lexicon make_lexicon(const CorpusSpec& spec, std::uint64_t seed) {
  check_spec(spec);
  Rng rng(mix_seed({seed, kLexicon}));
  const std::size_t n_words = spec.n_objects + spec.n_fillers;
  std::vector<std::size_t> lens(n_words);
  for (auto& l : lens) l = uniform_in(rng, spec.word_phones_min, spec.word_phones_max);
  const std::size_t slots = std::accumulate(lens.begin(), lens.end(), std::size_t{0});
  if (slots < spec.n_phones) {
    throw InvalidArgument("corpus: vocabulary has " + std::to_string(slots) +
                          " phone slots, too few to use all " + std::to_string(spec.n_phones) +
                          " phones");
  }
  // Draw phones from repeated shuffled permutations so every phone is used.
  std::vector<std::uint32_t> pool;
  while (pool.size() < slots) {
    std::vector<std::uint32_t> perm(spec.n_phones);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    pool.insert(pool.end(), perm.begin(), perm.end());
  }
  Lexicon lex;
  lex.n_objects = spec.n_objects;
  std::set<std::vector<std::uint32_t>> seen;
  std::size_t cursor = 0;
  for (std::size_t w = 0; w < n_words; ++w) {
    std::vector<std::uint32_t> phones(pool.begin() + static_cast<std::ptrdiff_t>(cursor),
                                      pool.begin() + static_cast<std::ptrdiff_t>(cursor + lens[w]));
    cursor += lens[w];
    int tries = 0;
    while (seen.contains(phones)) {
      if (++tries > 1000) throw InvalidArgument("corpus: cannot build distinct words; vocabulary too large");
      phones[rng.index(phones.size())] = static_cast<std::uint32_t>(rng.index(spec.n_phones));
    }
    seen.insert(phones);
    lex.word_phones.push_back(std::move(phones));
  }
  std::vector<bool> used(spec.n_phones, false);
  for (const auto& w : lex.word_phones)
    for (auto p : w) used[p] = true;
  if (std::find(used.begin(), used.end(), false) != used.end())
    throw InvalidArgument("corpus: lexicon does not use every phone");
  return lex;
}

std::vector<Speaker> make_speakers(const CorpusSpec& spec, const DomainSpec& domain, Domain tag,
                                   std::uint64_t seed) {
  if (domain.n_speakers == 0) throw InvalidArgument("corpus: zero speakers");
  if (domain.scale_min <= 0.0 || domain.scale_min > domain.scale_max)
    throw InvalidArgument("corpus: invalid speaker scale range");
  Rng rng(mix_seed({seed, kSpeakers, static_cast<std::uint64_t>(tag)}));
  const auto F = static_cast<Eigen::Index>(spec.feat_dim);
  std::vector<Speaker> out;
  for (std::size_t s = 0; s < domain.n_speakers; ++s) {
    Eigen::MatrixXd g(F, F);
    for (Eigen::Index r = 0; r < F; ++r)
      for (Eigen::Index c = 0; c < F; ++c) g(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd scales(F);
    for (Eigen::Index i = 0; i < F; ++i) scales(i) = rng.uniform(domain.scale_min, domain.scale_max);
    Eigen::MatrixXd a = q * scales.asDiagonal();
    Speaker spk;
    spk.id = domain.speaker_id_offset + static_cast<std::uint32_t>(s);
    spk.domain = tag;
    spk.noise_sigma = domain.noise_sigma;
    spk.transform.resize(static_cast<std::size_t>(F * F));
    for (Eigen::Index r = 0; r < F; ++r)
      for (Eigen::Index c = 0; c < F; ++c) spk.transform[static_cast<std::size_t>(r * F + c)] = static_cast<float>(a(r, c));
    spk.bias = gaussian(rng, spec.feat_dim, domain.bias_scale);
    out.push_back(std::move(spk));
  }
  return out;
}

Utterance synthesize_utterance(std::span<const std::uint32_t> words, const Speaker& speaker,
                               const PhoneInventory& phones, const Lexicon& lexicon,
                               const CorpusSpec& spec, Rng& rng) {
  if (words.empty()) throw InvalidArgument("synthesize_utterance: empty word sequence");
  const std::size_t F = phones.feat_dim;
  if (speaker.bias.size() != F || speaker.transform.size() != F * F)
    throw InvalidArgument("synthesize_utterance: speaker transform does not match feature dim");

  // Clean phone frames, stored time-major while assembling.
  std::vector<std::vector<float>> clean;
  Utterance utt;
  utt.words.assign(words.begin(), words.end());
  utt.speaker = speaker.id;
  utt.domain = speaker.domain;
  for (auto w : words) {
    if (w >= lexicon.size()) throw InvalidArgument("synthesize_utterance: unknown word " + std::to_string(w));
    for (auto p : lexicon.word_phones[w]) {
      const std::size_t len = phones.lengths[p];
      std::size_t out_len = len;
      if (spec.duration_jitter > 0) {
        const auto j = static_cast<std::ptrdiff_t>(spec.duration_jitter);
        const auto delta = static_cast<std::ptrdiff_t>(rng.index(2 * spec.duration_jitter + 1)) - j;
        out_len = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, static_cast<std::ptrdiff_t>(len) + delta));
      }
      const auto start = static_cast<std::uint32_t>(clean.size());
      for (std::size_t k = 0; k < out_len; ++k) {
        const std::size_t src = out_len == 1 ? 0 : (k * (len - 1) + (out_len - 1) / 2) / (out_len - 1);
        std::vector<float> frame(F);
        for (std::size_t f = 0; f < F; ++f) frame[f] = phones.templates[p][f * len + src];
        clean.push_back(std::move(frame));
      }
      utt.alignment.push_back({p, start, static_cast<std::uint32_t>(clean.size())});
    }
  }
  if (spec.coarticulation > 0.0) {
    const auto c = static_cast<float>(spec.coarticulation);
    const auto original = clean;
    for (std::size_t i = 0; i < utt.alignment.size(); ++i) {
      const auto& span = utt.alignment[i];
      if (i > 0) {
        const auto& prev = original[span.start - 1];
        for (std::size_t f = 0; f < F; ++f) clean[span.start][f] = (1 - c) * clean[span.start][f] + c * prev[f];
      }
      if (i + 1 < utt.alignment.size()) {
        const auto& next = original[span.end];
        for (std::size_t f = 0; f < F; ++f)
          clean[span.end - 1][f] = (1 - c) * clean[span.end - 1][f] + c * next[f];
      }
    }
  }

  const std::size_t T = clean.size();
  utt.n_frames = T;
  utt.frames.assign(F * T, 0.0f);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t r = 0; r < F; ++r) {
      double acc = speaker.bias[r];
      for (std::size_t c = 0; c < F; ++c) acc += static_cast<double>(speaker.transform[r * F + c]) * clean[t][c];
      if (speaker.noise_sigma > 0.0) acc += speaker.noise_sigma * rng.normal();
      utt.frames[r * T + t] = static_cast<float>(acc);
    }
  }
  return utt;
}

Corpus generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  check_spec(spec);
  Corpus c;
  c.spec = spec;
  c.seed = seed;
  c.domain = Domain::A;
  c.phones = make_inventory(spec, seed);
  c.lexicon = make_lexicon(spec, seed);
  c.speakers = make_speakers(spec, spec.domain_a, Domain::A, seed);
  {
    Rng rng(mix_seed({seed, kObjects}));
    c.object_embeddings = gaussian(rng, spec.n_objects * spec.image_token_dim);
  }

  const std::size_t n_images = spec.n_train_images + spec.n_test_images;
  const std::size_t D = spec.image_token_dim;
  Rng scene_rng(mix_seed({seed, kScenes}));
  for (std::size_t i = 0; i < n_images; ++i) {
    ImageScene scene;
    scene.image = static_cast<std::uint32_t>(i);
    std::vector<std::uint32_t> ids(spec.n_objects);
    std::iota(ids.begin(), ids.end(), 0u);
    const std::size_t k = uniform_in(scene_rng, spec.objects_min, spec.objects_max);
    for (std::size_t j = 0; j < k; ++j) std::swap(ids[j], ids[j + scene_rng.index(ids.size() - j)]);
    scene.objects.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    for (auto o : scene.objects)
      for (std::size_t d = 0; d < D; ++d)
        scene.tokens.push_back(c.object_embeddings[o * D + d] +
                               static_cast<float>(spec.image_noise * scene_rng.normal()));
    c.scenes.push_back(std::move(scene));
  }

  Rng cap_rng(mix_seed({seed, kCaptions}));
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t cap = 0; cap < spec.captions_per_image; ++cap) {
      std::vector<std::uint32_t> words = c.scenes[i].objects;
      std::shuffle(words.begin(), words.end(), cap_rng.engine());
      const std::size_t n_fill = uniform_in(cap_rng, spec.fillers_min, spec.fillers_max);
      for (std::size_t f = 0; f < n_fill; ++f) {
        const auto filler = static_cast<std::uint32_t>(spec.n_objects + cap_rng.index(spec.n_fillers));
        const std::size_t pos = cap_rng.index(words.size() + 1);
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), filler);
      }
      const auto& spk = c.speakers[cap_rng.index(c.speakers.size())];
      auto utt = synthesize_utterance(words, spk, c.phones, c.lexicon, spec, cap_rng);
      utt.id = static_cast<std::uint32_t>(c.utterances.size());
      utt.image = static_cast<std::uint32_t>(i);
      c.utterances.push_back(std::move(utt));
    }
  }
  for (std::size_t i = 0; i < n_images; ++i)
    (i < spec.n_train_images ? c.train_images : c.test_images).push_back(static_cast<std::uint32_t>(i));
  return c;
}

Corpus generate_abx_corpus(const CorpusSpec& spec, std::uint64_t seed,
                           std::span<const std::uint32_t> domain_a_speakers) {
  check_spec(spec);
  const auto& dom = spec.abx.domain;
  for (auto id : domain_a_speakers) {
    if (id >= dom.speaker_id_offset && id < dom.speaker_id_offset + dom.n_speakers) {
      throw InvalidArgument("abx corpus: speaker id " + std::to_string(id) +
                            " overlaps with domain A speakers");
    }
  }
  if (spec.abx.words_per_utterance == 0) throw InvalidArgument("abx corpus: words_per_utterance must be positive");
  Corpus c;
  c.spec = spec;
  c.seed = seed;
  c.domain = Domain::B;
  c.phones = make_inventory(spec, seed);
  c.lexicon = make_lexicon(spec, seed);
  c.speakers = make_speakers(spec, dom, Domain::B, seed);

  Rng rng(mix_seed({seed, kAbxUtterances}));
  constexpr std::size_t kMaxUtterancesPerSpeaker = 100000;
  for (const auto& spk : c.speakers) {
    std::vector<std::size_t> counts(spec.n_phones, 0);
    std::size_t made = 0;
    while (*std::min_element(counts.begin(), counts.end()) < spec.abx.min_tokens_per_phone) {
      if (++made > kMaxUtterancesPerSpeaker) throw Error("abx corpus: phone coverage not reachable");
      std::vector<std::uint32_t> words(spec.abx.words_per_utterance);
      for (auto& w : words) w = static_cast<std::uint32_t>(rng.index(c.lexicon.size()));
      auto utt = synthesize_utterance(words, spk, c.phones, c.lexicon, spec, rng);
      for (const auto& span : utt.alignment) ++counts[span.phone];
      utt.id = static_cast<std::uint32_t>(c.utterances.size());
      c.utterances.push_back(std::move(utt));
    }
  }
  return c;
}

// --- queries -------------------------------------------------------------------

std::vector<std::vector<std::uint32_t>> Corpus::captions_by_image() const {
  std::vector<std::vector<std::uint32_t>> out(scenes.size());
  for (const auto& u : utterances)
    if (u.image) out.at(*u.image).push_back(u.id);
  return out;
}

std::vector<std::uint32_t> Corpus::utterances_of(std::span<const std::uint32_t> images) const {
  std::set<std::uint32_t> wanted(images.begin(), images.end());
  std::vector<std::uint32_t> out;
  for (const auto& u : utterances)
    if (u.image && wanted.contains(*u.image)) out.push_back(u.id);
  return out;
}

const Speaker& Corpus::speaker(std::uint32_t id) const {
  for (const auto& s : speakers)
    if (s.id == id) return s;
  throw InvalidArgument("corpus: unknown speaker id " + std::to_string(id));
}

// --- persistence -----------------------------------------------------------------

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t F = corpus.phones.feat_dim;
  json utts = json::array();
  {
    std::ofstream frames(dir / "frames.bin", std::ios::binary | std::ios::trunc);
    if (!frames) throw IoError("cannot write " + (dir / "frames.bin").string());
    std::uint64_t offset = 0;
    for (const auto& u : corpus.utterances) {
      json align = json::array();
      for (const auto& s : u.alignment) align.push_back({s.phone, s.start, s.end});
      utts.push_back({{"id", u.id},
                      {"image", u.image ? json(*u.image) : json(nullptr)},
                      {"speaker", u.speaker},
                      {"domain", domain_str(u.domain)},
                      {"words", u.words},
                      {"alignment", align},
                      {"n_frames", u.n_frames},
                      {"offset", offset}});
      ad::write_f32(frames, u.frames.data(), u.frames.size());
      offset += u.frames.size() * 4;
    }
  }
  json scenes = json::array();
  if (!corpus.scenes.empty()) {
    std::ofstream blob(dir / "scenes.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write " + (dir / "scenes.bin").string());
    std::uint64_t offset = 0;
    for (const auto& s : corpus.scenes) {
      scenes.push_back({{"image", s.image}, {"objects", s.objects}, {"n_tokens", s.objects.size()},
                        {"offset", offset}});
      ad::write_f32(blob, s.tokens.data(), s.tokens.size());
      offset += s.tokens.size() * 4;
    }
  }
  json speakers = json::array();
  for (const auto& s : corpus.speakers)
    speakers.push_back({{"id", s.id}, {"domain", domain_str(s.domain)}, {"noise_sigma", s.noise_sigma}});
  json manifest{{"format", kManifestFormat},
                {"seed", corpus.seed},
                {"domain", domain_str(corpus.domain)},
                {"spec", corpus.spec},
                {"feat_dim", F},
                {"token_dim", corpus.spec.image_token_dim},
                {"lexicon", {{"n_objects", corpus.lexicon.n_objects}, {"words", corpus.lexicon.word_phones}}},
                {"phone_lengths", corpus.phones.lengths},
                {"speakers", speakers},
                {"splits", {{"train", corpus.train_images}, {"test", corpus.test_images}}},
                {"utterances", utts},
                {"scenes", scenes}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
}

Corpus load_corpus(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing corpus manifest in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("corrupt corpus manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != kManifestFormat) throw IoError("unsupported corpus manifest format");

  Corpus c;
  try {
    c.spec = m.at("spec").get<CorpusSpec>();
    c.seed = m.at("seed").get<std::uint64_t>();
    c.domain = parse_domain(m.at("domain").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError("corrupt corpus manifest: " + std::string(e.what()));
  }
  c.phones = make_inventory(c.spec, c.seed);
  c.lexicon = make_lexicon(c.spec, c.seed);
  if (m.at("lexicon").at("words").get<std::vector<std::vector<std::uint32_t>>>() != c.lexicon.word_phones)
    throw IoError("corpus manifest lexicon does not match its seed");
  c.speakers = make_speakers(c.spec, c.domain == Domain::A ? c.spec.domain_a : c.spec.abx.domain,
                             c.domain, c.seed);
  if (c.domain == Domain::A) {
    Rng rng(mix_seed({c.seed, kObjects}));
    c.object_embeddings = gaussian(rng, c.spec.n_objects * c.spec.image_token_dim);
  }
  const std::size_t F = c.phones.feat_dim;
  {
    std::ifstream frames(dir / "frames.bin", std::ios::binary);
    if (!frames) throw IoError("missing frames.bin in " + dir.string());
    for (const auto& u : m.at("utterances")) {
      Utterance utt;
      utt.id = u.at("id");
      if (!u.at("image").is_null()) utt.image = u.at("image").get<std::uint32_t>();
      utt.speaker = u.at("speaker");
      utt.domain = parse_domain(u.at("domain").get<std::string>());
      utt.words = u.at("words").get<std::vector<std::uint32_t>>();
      for (const auto& a : u.at("alignment")) utt.alignment.push_back({a.at(0), a.at(1), a.at(2)});
      utt.n_frames = u.at("n_frames");
      utt.frames.resize(F * utt.n_frames);
      frames.seekg(static_cast<std::streamoff>(u.at("offset").get<std::uint64_t>()));
      ad::read_f32(frames, utt.frames.data(), utt.frames.size());
      c.utterances.push_back(std::move(utt));
    }
  }
  if (!m.at("scenes").empty()) {
    std::ifstream blob(dir / "scenes.bin", std::ios::binary);
    if (!blob) throw IoError("missing scenes.bin in " + dir.string());
    const std::size_t D = m.at("token_dim");
    for (const auto& s : m.at("scenes")) {
      ImageScene scene;
      scene.image = s.at("image");
      scene.objects = s.at("objects").get<std::vector<std::uint32_t>>();
      scene.tokens.resize(scene.objects.size() * D);
      blob.seekg(static_cast<std::streamoff>(s.at("offset").get<std::uint64_t>()));
      ad::read_f32(blob, scene.tokens.data(), scene.tokens.size());
      c.scenes.push_back(std::move(scene));
    }
  }
  c.train_images = m.at("splits").at("train").get<std::vector<std::uint32_t>>();
  c.test_images = m.at("splits").at("test").get<std::vector<std::uint32_t>>();
  return c;
}

std::string corpus_hash(const fs::path& dir) {
  Sha256 h;
  for (const char* name : {"manifest.json", "frames.bin", "scenes.bin"}) {
    if (fs::exists(dir / name)) h.update(name).update_file(dir / name);
  }
  return h.hex();
}

void write_corpus_pair(const CorpusSpec& spec, std::uint64_t seed, const fs::path& out) {
  auto a = generate_corpus(spec, seed);
  std::vector<std::uint32_t> ids;
  for (const auto& s : a.speakers) ids.push_back(s.id);
  auto b = generate_abx_corpus(spec, seed, ids);
  save_corpus(a, out);
  save_corpus(b, out / "abx");
}

}  // namespace schedlab::corpus
