#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace schedlab::eval {

/// Frame features of one phone token, [n_frames, dim] row-major.
struct Segment {
  std::vector<float> frames;
  std::size_t n_frames = 0;
  std::size_t dim = 0;
  std::uint32_t phone = 0;
  std::uint32_t speaker = 0;

  const float* frame(std::size_t t) const { return frames.data() + t * dim; }
};

/// arccos of the clamped cosine similarity, divided by pi; in [0, 1].
double frame_distance(const float* a, const float* b, std::size_t dim);

/// DTW with diagonal/vertical/horizontal steps over angular frame distances,
/// normalized by the length of the chosen path. Zero-norm frames are nudged by
/// 1e-12 per coordinate (logged once).
double dtw_distance(const Segment& x, const Segment& y);

enum class Condition { within, across };
const char* condition_name(Condition c);

struct Triplet {
  std::uint32_t a = 0, b = 0, x = 0;  // segment indices
};

/// All triplets sharing (p1, p2, speaker of a/b, speaker of x).
struct TripletCell {
  std::uint32_t p1 = 0, p2 = 0;
  std::uint32_t speaker_ab = 0, speaker_x = 0;
  std::vector<Triplet> triplets;
};

struct TripletLimits {
  std::size_t max_per_cell = 200;
  /// Across condition: ordered (S1, S2) pairs sampled per phone pair; 0 = all.
  std::size_t max_speaker_pairs = 8;
};

struct TripletSet {
  Condition condition = Condition::within;
  std::vector<TripletCell> cells;
  /// Requested cells without any valid triplet.
  std::vector<std::string> skipped;
  std::size_t size() const;
};

/// Deterministic capped sampling of ABX triplets. Within: a, b, x from one
/// speaker with x != a. Across: a, b from S1 and x from S2 != S1. Throws
/// InvalidArgument when no cell has a valid triplet.
TripletSet make_triplets(std::span<const Segment> segments, Condition condition, const TripletLimits& limits,
                         std::uint64_t seed);

using DistanceFn = std::function<double(std::uint32_t, std::uint32_t)>;

/// 1 - accuracy, where a triplet scores 1 if d(a,x) < d(b,x), 0.5 on ties and
/// 0 otherwise. Accuracy is averaged within cells, the two orders of each phone
/// pair are averaged per speaker context, then contexts per phone pair, then
/// phone pairs.
double abx_error(const TripletSet& triplets, const DistanceFn& distance);

/// abx_error with DTW distances between `segments`, computed in parallel.
double abx_error(const TripletSet& triplets, std::span<const Segment> segments);

}  // namespace schedlab::eval
