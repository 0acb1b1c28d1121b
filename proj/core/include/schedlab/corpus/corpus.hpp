#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "schedlab/util/rng.hpp"

namespace schedlab::corpus {

enum class Domain : char { A = 'A', B = 'B' };

/// Acoustic statistics of one speaker population.
struct DomainSpec {
  std::size_t n_speakers = 8;
  std::uint32_t speaker_id_offset = 0;
  double noise_sigma = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double bias_scale = 0.1;
};

/// Audio-only held-out corpus used for phone discrimination.
struct AbxSpec {
  DomainSpec domain{8, 100, 0.6, 0.7, 1.4, 0.2};
  std::size_t min_tokens_per_phone = 20;
  std::size_t words_per_utterance = 6;
};

struct CorpusSpec {
  std::size_t n_phones = 20;
  std::size_t feat_dim = 13;
  std::size_t phone_len_min = 3;
  std::size_t phone_len_max = 8;
  /// Spread of frames around each phone's mean vector inside its template.
  double template_spread = 0.3;

  std::size_t n_objects = 30;
  std::size_t n_fillers = 40;
  std::size_t word_phones_min = 2;
  std::size_t word_phones_max = 4;

  std::size_t n_train_images = 1000;
  std::size_t n_test_images = 200;
  std::size_t captions_per_image = 5;
  std::size_t objects_min = 1;
  std::size_t objects_max = 4;
  std::size_t fillers_min = 1;
  std::size_t fillers_max = 3;

  std::size_t image_token_dim = 16;
  double image_noise = 0.1;

  /// Frames added or removed per phone token (uniform in [-j, j]); 0 disables.
  std::size_t duration_jitter = 0;
  /// Blend weight of the neighbouring phone at phone boundaries; 0 disables.
  double coarticulation = 0.0;

  DomainSpec domain_a{};
  AbxSpec abx{};
};

void to_json(nlohmann::json& j, const DomainSpec& s);
void from_json(const nlohmann::json& j, DomainSpec& s);
void to_json(nlohmann::json& j, const AbxSpec& s);
void from_json(const nlohmann::json& j, AbxSpec& s);
void to_json(nlohmann::json& j, const CorpusSpec& s);
/// Strict: unknown keys raise InvalidArgument naming the key.
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct PhoneInventory {
  std::size_t feat_dim = 0;
  /// Per phone, a feat_dim x length template in row-major order.
  std::vector<std::vector<float>> templates;
  std::vector<std::size_t> lengths;

  std::size_t size() const noexcept { return lengths.size(); }
};

/// Words 0..n_objects-1 name objects; the rest are fillers.
struct Lexicon {
  std::vector<std::vector<std::uint32_t>> word_phones;
  std::size_t n_objects = 0;

  std::size_t size() const noexcept { return word_phones.size(); }
  bool is_object(std::uint32_t word) const noexcept { return word < n_objects; }
};

struct Speaker {
  std::uint32_t id = 0;
  Domain domain = Domain::A;
  /// feat_dim x feat_dim, row-major.
  std::vector<float> transform;
  std::vector<float> bias;
  double noise_sigma = 0.0;

  /// Ratio of largest to smallest singular value of the transform.
  double condition_number() const;
};

struct PhoneSpan {
  std::uint32_t phone = 0;
  std::uint32_t start = 0;  // inclusive frame
  std::uint32_t end = 0;    // exclusive frame

  bool operator==(const PhoneSpan&) const = default;
};

struct Utterance {
  std::uint32_t id = 0;
  std::optional<std::uint32_t> image;
  std::uint32_t speaker = 0;
  Domain domain = Domain::A;
  std::vector<std::uint32_t> words;
  std::vector<PhoneSpan> alignment;
  std::size_t n_frames = 0;
  /// feat_dim x n_frames, row-major.
  std::vector<float> frames;
};

struct ImageScene {
  std::uint32_t image = 0;
  std::vector<std::uint32_t> objects;
  /// objects.size() x token_dim, row-major.
  std::vector<float> tokens;
};

struct Corpus {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  Domain domain = Domain::A;
  PhoneInventory phones;
  Lexicon lexicon;
  std::vector<Speaker> speakers;
  /// n_objects x image_token_dim, row-major.
  std::vector<float> object_embeddings;
  std::vector<Utterance> utterances;
  std::vector<ImageScene> scenes;  // indexed by image id
  std::vector<std::uint32_t> train_images;
  std::vector<std::uint32_t> test_images;

  /// Caption utterance indices per image id.
  std::vector<std::vector<std::uint32_t>> captions_by_image() const;
  /// Utterance indices whose image is in `images`.
  std::vector<std::uint32_t> utterances_of(std::span<const std::uint32_t> images) const;
  const Speaker& speaker(std::uint32_t id) const;
};

/// Phone templates from the corpus seed; shared by both domains.
PhoneInventory make_inventory(const CorpusSpec& spec, std::uint64_t seed);
Lexicon make_lexicon(const CorpusSpec& spec, std::uint64_t seed);
std::vector<Speaker> make_speakers(const CorpusSpec& spec, const DomainSpec& domain, Domain tag,
                                   std::uint64_t seed);

/// Concatenates the words' phone templates, applies the speaker transform and
/// adds i.i.d. Gaussian noise. Throws InvalidArgument for an empty sequence or
/// unknown word.
Utterance synthesize_utterance(std::span<const std::uint32_t> words, const Speaker& speaker,
                               const PhoneInventory& phones, const Lexicon& lexicon,
                               const CorpusSpec& spec, Rng& rng);

/// Paired caption/image corpus in domain A.
Corpus generate_corpus(const CorpusSpec& spec, std::uint64_t seed);

/// Audio-only corpus in domain B. `domain_a_speakers` lists ids already used
/// by domain A; any overlap is an error.
Corpus generate_abx_corpus(const CorpusSpec& spec, std::uint64_t seed,
                           std::span<const std::uint32_t> domain_a_speakers);

/// manifest.json + frames.bin (+ scenes.bin when images exist).
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

/// SHA-256 over the manifest and blobs of a saved corpus directory.
std::string corpus_hash(const std::filesystem::path& dir);

/// Writes `<out>` (domain A) and `<out>/abx` (domain B).
void write_corpus_pair(const CorpusSpec& spec, std::uint64_t seed, const std::filesystem::path& out);

}  // namespace schedlab::corpus
