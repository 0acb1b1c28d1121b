#include "schedlab/eval/abx.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <tuple>

#include "schedlab/util/error.hpp"
#include "schedlab/util/parallel.hpp"
#include "schedlab/util/rng.hpp"

namespace schedlab::eval {

namespace {

std::atomic<bool> zero_norm_logged{false};

double norm_or_nudge(const float* v, std::size_t dim, std::vector<double>& scratch, const double*& data) {
  double n2 = 0;
  for (std::size_t k = 0; k < dim; ++k) n2 += static_cast<double>(v[k]) * v[k];
  if (n2 > 0) {
    data = nullptr;
    return std::sqrt(n2);
  }
  if (!zero_norm_logged.exchange(true)) spdlog::warn("abx: zero-norm frame vector; perturbing by 1e-12");
  scratch.assign(dim, 1e-12);
  data = scratch.data();
  return 1e-12 * std::sqrt(static_cast<double>(dim));
}

}  // namespace

double frame_distance(const float* a, const float* b, std::size_t dim) {
  thread_local std::vector<double> sa, sb;
  const double *pa = nullptr, *pb = nullptr;
  const double na = norm_or_nudge(a, dim, sa, pa);
  const double nb = norm_or_nudge(b, dim, sb, pb);
  double dot = 0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double x = pa ? pa[k] : static_cast<double>(a[k]);
    const double y = pb ? pb[k] : static_cast<double>(b[k]);
    dot += x * y;
  }
  const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
  return std::acos(c) / std::numbers::pi;
}

double dtw_distance(const Segment& x, const Segment& y) {
  if (x.n_frames == 0 || y.n_frames == 0) throw InvalidArgument("dtw: empty segment");
  if (x.dim != y.dim) throw InvalidArgument("dtw: segments differ in feature dimension");
  const std::size_t n = x.n_frames, m = y.n_frames;
  std::vector<double> cost(n * m);
  std::vector<std::size_t> len(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double d = frame_distance(x.frame(i), y.frame(j), x.dim);
      if (i == 0 && j == 0) {
        cost[0] = d;
        len[0] = 1;
        continue;
      }
      // Predecessors in preference order: diagonal, vertical, horizontal.
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_len = 0;
      auto consider = [&](bool ok, std::size_t k) {
        if (ok && cost[k] < best) best = cost[k], best_len = len[k];
      };
      consider(i > 0 && j > 0, (i - 1) * m + (j - 1));
      consider(i > 0, (i - 1) * m + j);
      consider(j > 0, i * m + (j - 1));
      cost[i * m + j] = best + d;
      len[i * m + j] = best_len + 1;
    }
  }
  return cost.back() / static_cast<double>(len.back());
}

const char* condition_name(Condition c) { return c == Condition::within ? "within" : "across"; }

std::size_t TripletSet::size() const {
  std::size_t n = 0;
  for (const auto& c : cells) n += c.triplets.size();
  return n;
}

namespace {

/// Up to `cap` distinct indices of [0, n) in increasing order.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> out;
  if (cap == 0 || n <= cap) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  std::set<std::size_t> chosen;
  for (std::size_t j = n - cap; j < n; ++j) {
    const std::size_t t = rng.index(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

}  // namespace

TripletSet make_triplets(std::span<const Segment> segments, Condition condition, const TripletLimits& limits,
                         std::uint64_t seed) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> groups;  // (speaker, phone)
  std::set<std::uint32_t> speakers, phones;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].n_frames == 0) throw InvalidArgument("abx: segment with no frames");
    groups[{segments[i].speaker, segments[i].phone}].push_back(static_cast<std::uint32_t>(i));
    speakers.insert(segments[i].speaker);
    phones.insert(segments[i].phone);
  }
  auto tokens = [&](std::uint32_t s, std::uint32_t p) -> const std::vector<std::uint32_t>* {
    auto it = groups.find({s, p});
    return it == groups.end() ? nullptr : &it->second;
  };

  TripletSet set;
  set.condition = condition;
  if (condition == Condition::within) {
    for (auto s : speakers)
      for (auto p1 : phones)
        for (auto p2 : phones) {
          if (p1 == p2) continue;
          const auto* a = tokens(s, p1);
          const auto* b = tokens(s, p2);
          if (!a || !b) continue;
          const std::string label = "within p1=" + std::to_string(p1) + " p2=" + std::to_string(p2) +
                                    " speaker=" + std::to_string(s);
          if (a->size() < 2) {
            set.skipped.push_back(label);
            continue;
          }
          const std::size_t na = a->size(), nb = b->size();
          Rng rng(mix_seed({seed, 0, p1, p2, s}));
          TripletCell cell{p1, p2, s, s, {}};
          for (auto idx : sample_indices(na * (na - 1) * nb, limits.max_per_cell, rng)) {
            const std::size_t ia = idx / ((na - 1) * nb);
            std::size_t ix = (idx / nb) % (na - 1);
            if (ix >= ia) ++ix;
            cell.triplets.push_back({(*a)[ia], (*b)[idx % nb], (*a)[ix]});
          }
          set.cells.push_back(std::move(cell));
        }
  } else {
    for (auto p1 : phones)
      for (auto p2 : phones) {
        if (p1 == p2) continue;
        std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
        for (auto s1 : speakers)
          for (auto s2 : speakers)
            if (s1 != s2 && tokens(s1, p1) && tokens(s1, p2) && tokens(s2, p1)) pairs.emplace_back(s1, s2);
        if (pairs.empty()) {
          set.skipped.push_back("across p1=" + std::to_string(p1) + " p2=" + std::to_string(p2));
          continue;
        }
        Rng pair_rng(mix_seed({seed, 1, p1, p2}));
        for (auto k : sample_indices(pairs.size(), limits.max_speaker_pairs, pair_rng)) {
          const auto [s1, s2] = pairs[k];
          const auto &a = *tokens(s1, p1), &b = *tokens(s1, p2), &x = *tokens(s2, p1);
          const std::size_t na = a.size(), nb = b.size(), nx = x.size();
          Rng rng(mix_seed({seed, 2, p1, p2, s1, s2}));
          TripletCell cell{p1, p2, s1, s2, {}};
          for (auto idx : sample_indices(na * nb * nx, limits.max_per_cell, rng))
            cell.triplets.push_back({a[idx / (nb * nx)], b[(idx / nx) % nb], x[idx % nx]});
          set.cells.push_back(std::move(cell));
        }
      }
  }
  if (set.cells.empty()) {
    throw InvalidArgument(std::string("abx: no valid ") + condition_name(condition) + "-speaker triplets" +
                          (condition == Condition::across ? " (needs at least two speakers)" : ""));
  }
  return set;
}

namespace {

double score(double dax, double dbx) { return dax < dbx ? 1.0 : (dax == dbx ? 0.5 : 0.0); }

double aggregate(const TripletSet& set, const std::vector<double>& cell_accuracy) {
  using Ctx = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t, std::uint32_t>;
  std::map<Ctx, std::vector<double>> by_unordered;
  for (std::size_t i = 0; i < set.cells.size(); ++i) {
    const auto& c = set.cells[i];
    by_unordered[{std::min(c.p1, c.p2), std::max(c.p1, c.p2), c.speaker_ab, c.speaker_x}].push_back(cell_accuracy[i]);
  }
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<double>> by_pair;
  for (const auto& [k, accs] : by_unordered) {
    double s = 0;
    for (double a : accs) s += a;
    by_pair[{std::get<0>(k), std::get<1>(k)}].push_back(s / static_cast<double>(accs.size()));
  }
  double total = 0;
  for (const auto& [k, accs] : by_pair) {
    double s = 0;
    for (double a : accs) s += a;
    total += s / static_cast<double>(accs.size());
  }
  return 1.0 - total / static_cast<double>(by_pair.size());
}

}  // namespace

double abx_error(const TripletSet& set, const DistanceFn& distance) {
  if (set.size() == 0) throw InvalidArgument("abx: empty triplet set");
  std::vector<double> acc(set.cells.size(), 0.0);
  for (std::size_t i = 0; i < set.cells.size(); ++i) {
    const auto& c = set.cells[i];
    double s = 0;
    for (const auto& t : c.triplets) s += score(distance(t.a, t.x), distance(t.b, t.x));
    acc[i] = s / static_cast<double>(c.triplets.size());
  }
  return aggregate(set, acc);
}

double abx_error(const TripletSet& set, std::span<const Segment> segments) {
  if (set.size() == 0) throw InvalidArgument("abx: empty triplet set");
  std::vector<double> acc(set.cells.size(), 0.0);
  parallel_for(set.cells.size(), [&](std::size_t i) {
    const auto& c = set.cells[i];
    double s = 0;
    for (const auto& t : c.triplets)
      s += score(dtw_distance(segments[t.a], segments[t.x]), dtw_distance(segments[t.b], segments[t.x]));
    acc[i] = s / static_cast<double>(c.triplets.size());
  });
  return aggregate(set, acc);
}

}  // namespace schedlab::eval
