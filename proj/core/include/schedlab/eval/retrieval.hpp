#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "schedlab/corpus/corpus.hpp"
#include "schedlab/eval/abx.hpp"
#include "schedlab/model/model.hpp"

namespace schedlab::eval {

/// Row-major [n, dim] embedding matrix.
struct EmbeddingSet {
  std::vector<float> values;
  std::size_t n = 0;
  std::size_t dim = 0;
};

struct RetrievalResult {
  /// k -> recall.
  std::map<std::size_t, double> speech_to_image;
  std::map<std::size_t, double> image_to_speech;
  std::size_t n_captions = 0;
  std::size_t n_images = 0;
};

/// Cosine-similarity ranking with ties broken by candidate index.
/// caption_image[i] is the image row of caption i. Speech-to-image counts a hit
/// when the caption's image ranks in the top k; image-to-speech when any of the
/// image's captions does.
RetrievalResult recall_at_k(const EmbeddingSet& audio, const EmbeddingSet& images,
                            std::span<const std::uint32_t> caption_image, std::span<const std::size_t> ks);

/// CLS embeddings of every caption of `image_ids` and of the images.
struct PairedEmbeddings {
  EmbeddingSet audio;
  EmbeddingSet images;
  std::vector<std::uint32_t> caption_image;
};
PairedEmbeddings embed_split(const model::Model<float>& model, const corpus::Corpus& corpus,
                             std::span<const std::uint32_t> image_ids);

RetrievalResult evaluate_retrieval(const model::Model<float>& model, const corpus::Corpus& corpus,
                                   std::span<const std::size_t> ks);

/// Phone segments of every utterance at SSL-stream layers `layers` (1-based).
/// Alignment spans map to latent frames [floor(start/s), ceil(end/s)) with s
/// the total frontend stride. Result is indexed [layer][segment].
std::vector<std::vector<Segment>> layer_segments(const model::Model<float>& model, const corpus::Corpus& corpus,
                                                 std::span<const std::size_t> layers);

/// Segments built directly from the input frames (no model).
std::vector<Segment> input_segments(const corpus::Corpus& corpus);

struct AbxRow {
  std::size_t layer = 0;
  std::size_t epoch = 0;
  Condition condition = Condition::within;
  double error = 0.0;
  std::size_t n_triplets = 0;
};

struct AbxOptions {
  TripletLimits limits{};
  std::uint64_t seed = 0;
  std::vector<Condition> conditions{Condition::within, Condition::across};
};

/// ABX error per (layer, condition) for one model.
std::vector<AbxRow> abx_layers(const model::Model<float>& model, const corpus::Corpus& abx_corpus,
                               std::span<const std::size_t> layers, const AbxOptions& options, std::size_t epoch = 0);

/// Per-layer per-epoch ABX over the checkpoints of a run. Throws when a
/// requested checkpoint is missing.
std::vector<AbxRow> layer_sweep_abx(const std::filesystem::path& run_dir, const corpus::Corpus& abx_corpus,
                                    std::span<const std::size_t> layers, std::span<const std::size_t> epochs,
                                    const AbxOptions& options = {});

/// Best (lowest-error) layer per (epoch, condition), ties to the lower layer.
std::vector<AbxRow> best_layers(std::span<const AbxRow> rows);

/// abx.csv: layer,epoch,condition,error,n_triplets
std::string abx_csv(std::span<const AbxRow> rows);
/// retrieval.csv: direction,k,recall,n_queries,n_candidates
std::string retrieval_csv(const RetrievalResult& r);

}  // namespace schedlab::eval
