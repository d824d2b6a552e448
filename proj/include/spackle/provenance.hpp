#pragma once

#include <filesystem>
#include <string>

#include "spackle/dataset.hpp"

namespace spackle {

// Where each expression entry came from. `observed` exactly where the
// dataset's observed mask is true; completion fills carry the fallback
// level that produced them.
enum class Source : std::uint8_t {
  observed = 0,
  median_local = 1,
  median_slide = 2,
  median_global = 3,
  model = 4,
};

inline const char* to_string(Source s) {
  switch (s) {
    case Source::observed: return "observed";
    case Source::median_local: return "median_local";
    case Source::median_slide: return "median_slide";
    case Source::median_global: return "median_global";
    case Source::model: return "model";
  }
  return "?";
}

inline Source source_from_string(const std::string& s) {
  for (Source v : {Source::observed, Source::median_local, Source::median_slide,
                   Source::median_global, Source::model})
    if (s == to_string(v)) return v;
  throw ValidationError("unknown provenance source '" + s + "'");
}

struct CompletionProvenance {
  BoolMatrix source;  // Source codes, aligned with expression

  Source at(Eigen::Index spot, Eigen::Index gene) const {
    return static_cast<Source>(source(spot, gene));
  }
  void set(Eigen::Index spot, Eigen::Index gene, Source s) {
    source(spot, gene) = static_cast<std::uint8_t>(s);
  }
};

// All-observed provenance for a dataset without missing entries (or one
// whose completion has not run yet; unobserved entries are marked by the
// observed mask, not here).
inline CompletionProvenance observed_provenance(const Dataset& ds) {
  CompletionProvenance p;
  p.source.resize(ds.num_spots(), ds.num_genes());
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j)
      p.source(i, j) = static_cast<std::uint8_t>(ds.observed(i, j) ? Source::observed
                                                                   : Source::median_global);
  return p;
}

inline void check_provenance(const Dataset& ds, const CompletionProvenance& p) {
  if (p.source.rows() != ds.num_spots() || p.source.cols() != ds.num_genes())
    throw ValidationError("provenance shape does not match dataset");
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j) {
      bool obs = ds.observed(i, j) != 0;
      if (obs != (p.at(i, j) == Source::observed))
        throw ValidationError("provenance disagrees with observed mask at spot " +
                              ds.spots[static_cast<std::size_t>(i)].spot_id + ", gene " +
                              ds.genes[static_cast<std::size_t>(j)]);
    }
}

inline void save_provenance(const CompletionProvenance& p, const Dataset& ds,
                            const std::filesystem::path& root) {
  TsvWriter w((root / "provenance.tsv").string());
  w.row(ds.genes);
  std::vector<std::string> cells(static_cast<std::size_t>(ds.num_genes()));
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i) {
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j)
      cells[static_cast<std::size_t>(j)] = to_string(p.at(i, j));
    w.row(cells);
  }
  w.close();
}

inline CompletionProvenance load_provenance(const Dataset& ds, const std::filesystem::path& root) {
  auto path = root / "provenance.tsv";
  if (!std::filesystem::exists(path)) throw ValidationError("missing file " + path.string());
  TsvTable t = read_tsv(path.string());
  if (static_cast<Eigen::Index>(t.rows.size()) != ds.num_spots())
    throw ValidationError("provenance.tsv row count does not match dataset");
  CompletionProvenance p;
  p.source.resize(ds.num_spots(), ds.num_genes());
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) != ds.num_genes())
      throw ValidationError("provenance.tsv row " + std::to_string(i + 2) + " has wrong column count");
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j)
      p.set(i, j, source_from_string(row[static_cast<std::size_t>(j)]));
  }
  check_provenance(ds, p);
  return p;
}

}  // namespace spackle
