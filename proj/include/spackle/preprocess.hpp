#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "spackle/dataset.hpp"
#include "spackle/hex.hpp"
#include "spackle/provenance.hpp"

namespace spackle {

struct NormalizeOptions {
  // Drop spots whose observed counts sum to zero instead of failing.
  bool drop_zero_library_spots = false;
};

// Transcripts-per-million scaling within each spot followed by log1p:
// expression[i][j] = ln(1 + counts[i][j] / library_size(i) * 1e6) for
// observed entries, where library_size(i) sums the spot's observed counts.
// Unobserved entries keep the 0.0 sentinel. Guarded against being applied
// twice.
inline Dataset normalize(const Dataset& input, const NormalizeOptions& opts = {}) {
  if (input.normalization_applied)
    throw ValidationError("dataset is already normalized");
  if (input.completed) throw ValidationError("cannot normalize a completed dataset");

  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < input.num_spots(); ++i) {
    double lib = 0.0;
    for (Eigen::Index j = 0; j < input.num_genes(); ++j)
      if (input.observed(i, j)) lib += static_cast<double>(input.raw_counts(i, j));
    if (lib <= 0.0) {
      if (!opts.drop_zero_library_spots)
        throw ValidationError("spot " + input.spots[static_cast<std::size_t>(i)].spot_id +
                              " on slide " + input.spots[static_cast<std::size_t>(i)].slide_id +
                              " has zero library size");
    } else {
      keep.push_back(i);
    }
  }

  Dataset ds;
  ds.genes = input.genes;
  ds.split = input.split;
  ds.genes_selected = input.genes_selected;
  ds.normalization_applied = true;
  const Eigen::Index n = static_cast<Eigen::Index>(keep.size());
  const Eigen::Index g = input.num_genes();
  if (n == 0) throw ValidationError("all spots dropped: every library size is zero");
  ds.spots.reserve(static_cast<std::size_t>(n));
  ds.raw_counts.resize(n, g);
  ds.expression.setZero(n, g);
  ds.observed.resize(n, g);
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::Index i = keep[static_cast<std::size_t>(r)];
    ds.spots.push_back(input.spots[static_cast<std::size_t>(i)]);
    ds.raw_counts.row(r) = input.raw_counts.row(i);
    ds.observed.row(r) = input.observed.row(i);
    double lib = 0.0;
    for (Eigen::Index j = 0; j < g; ++j)
      if (ds.observed(r, j)) lib += static_cast<double>(ds.raw_counts(r, j));
    for (Eigen::Index j = 0; j < g; ++j)
      if (ds.observed(r, j))
        ds.expression(r, j) =
            std::log1p(static_cast<double>(ds.raw_counts(r, j)) / lib * 1e6);
  }
  return ds;
}

// Moran's I with binary 1-hop hex adjacency, computed per slide over the
// spots where the gene is observed and aggregated across slides by
// observed-spot-count weighted mean. Slides where the gene has fewer than
// two observed spots are skipped; a gene that is degenerate on every
// usable slide (constant, or no adjacent observed pair) is an error.
inline double morans_i(const Dataset& ds, Eigen::Index gene, const SlideIndexes& indexes) {
  if (gene < 0 || gene >= ds.num_genes()) throw ValidationError("gene index out of range");
  double weighted_sum = 0.0, weight_total = 0.0;
  bool saw_constant = false, saw_no_pairs = false;
  for (const auto& slide_id : ds.slide_ids()) {
    const HexIndex& index = indexes.at(slide_id);
    std::vector<Eigen::Index> obs;
    for (Eigen::Index i : ds.spots_on_slide(slide_id))
      if (ds.observed(i, gene)) obs.push_back(i);
    if (obs.size() < 2) continue;

    double mean = 0.0;
    for (Eigen::Index i : obs) mean += ds.expression(i, gene);
    mean /= static_cast<double>(obs.size());

    double denom = 0.0;
    for (Eigen::Index i : obs) {
      double d = ds.expression(i, gene) - mean;
      denom += d * d;
    }
    if (denom == 0.0) {
      saw_constant = true;
      continue;
    }

    // w_ij = 1 for 1-hop neighbors; both orientations counted.
    double num = 0.0;
    long long w_total = 0;
    for (Eigen::Index i : obs) {
      const auto& rec = ds.spots[static_cast<std::size_t>(i)];
      for (Eigen::Index nb : hex_neighbors(index, rec.array_row, rec.array_col, 1))
        if (ds.observed(nb, gene)) {
          ++w_total;
          num += (ds.expression(i, gene) - mean) * (ds.expression(nb, gene) - mean);
        }
    }
    if (w_total == 0) {
      saw_no_pairs = true;
      continue;
    }

    double i_slide = static_cast<double>(obs.size()) / static_cast<double>(w_total) * num / denom;
    weighted_sum += i_slide * static_cast<double>(obs.size());
    weight_total += static_cast<double>(obs.size());
  }
  if (weight_total == 0.0) {
    if (saw_constant)
      throw ValidationError("degenerate Moran statistic: gene " +
                            ds.genes[static_cast<std::size_t>(gene)] + " has zero variance");
    if (saw_no_pairs)
      throw ValidationError("Moran statistic undefined: gene " +
                            ds.genes[static_cast<std::size_t>(gene)] +
                            " has no adjacent observed pairs");
    throw ValidationError("Moran statistic undefined: gene " +
                          ds.genes[static_cast<std::size_t>(gene)] +
                          " has fewer than two observed spots on every slide");
  }
  return weighted_sum / weight_total;
}

inline double morans_i(const Dataset& ds, Eigen::Index gene) {
  SlideIndexes indexes(ds);
  return morans_i(ds, gene, indexes);
}

struct MoranScore {
  std::string gene;
  double i_statistic = std::numeric_limits<double>::quiet_NaN();  // NaN when not rankable
  int rank = 0;                                                   // 1-based
  bool rankable = false;
};

// Scores for every gene, ranked by descending I. Genes whose statistic is
// undefined rank after all rankable genes. Ties break lexicographically by
// gene name, so the ranking is a deterministic permutation of 1..g.
inline std::vector<MoranScore> moran_ranking(const Dataset& ds) {
  SlideIndexes indexes(ds);
  std::vector<MoranScore> scores;
  for (Eigen::Index j = 0; j < ds.num_genes(); ++j) {
    MoranScore s;
    s.gene = ds.genes[static_cast<std::size_t>(j)];
    try {
      s.i_statistic = morans_i(ds, j, indexes);
      s.rankable = true;
    } catch (const ValidationError&) {
      s.rankable = false;
    }
    scores.push_back(std::move(s));
  }
  std::sort(scores.begin(), scores.end(), [](const MoranScore& a, const MoranScore& b) {
    if (a.rankable != b.rankable) return a.rankable;
    if (a.rankable && a.i_statistic != b.i_statistic) return a.i_statistic > b.i_statistic;
    return a.gene < b.gene;
  });
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i].rank = static_cast<int>(i) + 1;
  return scores;
}

// Restricts the dataset to the k genes with the highest Moran's I, ordered
// by descending statistic. The paper-scale choices are k=32 and k=128;
// smaller values are accepted for desk-scale work.
inline Dataset select_genes(const Dataset& input, int k) {
  if (!input.normalization_applied)
    throw ValidationError("select_genes requires a normalized dataset");
  if (k < 1) throw ValidationError("k must be >= 1");
  if (static_cast<Eigen::Index>(k) > input.num_genes())
    throw ValidationError("k exceeds the number of genes");

  std::vector<MoranScore> ranking = moran_ranking(input);
  int rankable = 0;
  for (const auto& s : ranking)
    if (s.rankable) ++rankable;
  if (rankable < k)
    throw ValidationError("only " + std::to_string(rankable) + " genes have a defined Moran's I, need " +
                          std::to_string(k));

  std::map<std::string, Eigen::Index> gene_index;
  for (Eigen::Index j = 0; j < input.num_genes(); ++j)
    gene_index[input.genes[static_cast<std::size_t>(j)]] = j;

  Dataset ds;
  ds.spots = input.spots;
  ds.split = input.split;
  ds.normalization_applied = input.normalization_applied;
  ds.completed = input.completed;
  ds.genes_selected = true;
  const Eigen::Index n = input.num_spots();
  ds.raw_counts.resize(n, k);
  ds.expression.resize(n, k);
  ds.observed.resize(n, k);
  for (int out = 0; out < k; ++out) {
    Eigen::Index j = gene_index.at(ranking[static_cast<std::size_t>(out)].gene);
    ds.genes.push_back(input.genes[static_cast<std::size_t>(j)]);
    ds.raw_counts.col(out) = input.raw_counts.col(j);
    ds.expression.col(out) = input.expression.col(j);
    ds.observed.col(out) = input.observed.col(j);
  }
  return ds;
}

namespace detail {
inline double median_of(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

// Adaptive median completion. Each missing entry is filled, per gene and
// per slide, with the median of observed values within growing hop-radius
// rings (radius 1..max_radius_hops, first radius with any observed value
// wins), falling back to the slide median of the gene, then to its global
// median, then to 0.0. Observed entries are never touched.
inline std::pair<Dataset, CompletionProvenance> median_complete(const Dataset& input,
                                                                int max_radius_hops = 4) {
  if (max_radius_hops < 1) throw ValidationError("max_radius_hops must be >= 1");
  if (!input.normalization_applied)
    throw ValidationError("median_complete requires a normalized dataset");
  if (input.completed) throw ValidationError("dataset is already completed");

  Dataset ds = input;
  CompletionProvenance prov = observed_provenance(input);
  const Eigen::Index g = ds.num_genes();

  // Global per-gene medians, lazily computed.
  std::vector<std::optional<double>> global_median(static_cast<std::size_t>(g));
  auto global_of = [&](Eigen::Index j) -> std::optional<double> {
    auto& slot = global_median[static_cast<std::size_t>(j)];
    if (!slot.has_value()) {
      std::vector<double> vals;
      for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
        if (input.observed(i, j)) vals.push_back(input.expression(i, j));
      slot = vals.empty() ? std::numeric_limits<double>::quiet_NaN() : detail::median_of(vals);
    }
    return std::isnan(*slot) ? std::nullopt : slot;
  };

  for (const auto& slide_id : ds.slide_ids()) {
    HexIndex index = HexIndex::build(input, slide_id);
    std::vector<Eigen::Index> slide_spots = ds.spots_on_slide(slide_id);

    std::vector<std::optional<double>> slide_median(static_cast<std::size_t>(g));
    auto slide_of = [&](Eigen::Index j) -> std::optional<double> {
      auto& slot = slide_median[static_cast<std::size_t>(j)];
      if (!slot.has_value()) {
        std::vector<double> vals;
        for (Eigen::Index i : slide_spots)
          if (input.observed(i, j)) vals.push_back(input.expression(i, j));
        slot = vals.empty() ? std::numeric_limits<double>::quiet_NaN() : detail::median_of(vals);
      }
      return std::isnan(*slot) ? std::nullopt : slot;
    };

    for (Eigen::Index i : slide_spots) {
      bool any_missing = false;
      for (Eigen::Index j = 0; j < g; ++j)
        if (!input.observed(i, j)) {
          any_missing = true;
          break;
        }
      if (!any_missing) continue;

      const auto& rec = ds.spots[static_cast<std::size_t>(i)];
      auto rings = neighbor_rings(index, rec.array_row, rec.array_col, max_radius_hops);
      for (Eigen::Index j = 0; j < g; ++j) {
        if (input.observed(i, j)) continue;
        std::vector<double> vals;
        bool filled = false;
        for (const auto& ring : rings) {
          for (Eigen::Index nb : ring)
            if (input.observed(nb, j)) vals.push_back(input.expression(nb, j));
          if (!vals.empty()) {
            ds.expression(i, j) = detail::median_of(vals);
            prov.set(i, j, Source::median_local);
            filled = true;
            break;
          }
        }
        if (filled) continue;
        if (auto m = slide_of(j)) {
          ds.expression(i, j) = *m;
          prov.set(i, j, Source::median_slide);
        } else if (auto gm = global_of(j)) {
          ds.expression(i, j) = *gm;
          prov.set(i, j, Source::median_global);
        } else {
          ds.expression(i, j) = 0.0;
          prov.set(i, j, Source::median_global);
        }
      }
    }
  }

  ds.completed = true;
  return {std::move(ds), std::move(prov)};
}

}  // namespace spackle
