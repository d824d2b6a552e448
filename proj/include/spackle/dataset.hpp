#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "spackle/errors.hpp"
#include "spackle/tsv.hpp"

namespace spackle {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split label '" + s + "' (expected train/val/test)");
}

struct SpotRecord {
  std::string spot_id;
  std::string slide_id;
  int array_row = 0;  // Visium-style hex lattice, odd rows offset east
  int array_col = 0;
  double pixel_x = 0.0;  // image coordinates, informational only
  double pixel_y = 0.0;
};

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;
using BoolMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// A slide-partitioned spot table with raw and normalized expression and an
// explicit real-vs-missing observation mask. Matrices are [num_spots x
// num_genes], rows aligned with `spots`, columns with `genes`. Immutable
// once loaded; operations return transformed copies.
struct Dataset {
  std::vector<SpotRecord> spots;
  std::vector<std::string> genes;
  CountMatrix raw_counts;
  Eigen::MatrixXd expression;
  BoolMatrix observed;  // 1 = measured in tissue, 0 = dropout/missing
  std::map<std::string, Split> split;
  bool normalization_applied = false;
  bool genes_selected = false;
  bool completed = false;  // missing entries hold completion values, not the 0.0 sentinel

  Eigen::Index num_spots() const { return static_cast<Eigen::Index>(spots.size()); }
  Eigen::Index num_genes() const { return static_cast<Eigen::Index>(genes.size()); }

  // Slide ids in order of first appearance in the spot table.
  std::vector<std::string> slide_ids() const {
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& s : spots)
      if (seen.insert(s.slide_id).second) ids.push_back(s.slide_id);
    return ids;
  }

  std::vector<Eigen::Index> spots_in_split(Split which) const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < num_spots(); ++i) {
      auto it = split.find(spots[i].slide_id);
      if (it != split.end() && it->second == which) out.push_back(i);
    }
    return out;
  }

  std::vector<Eigen::Index> spots_on_slide(const std::string& slide_id) const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < num_spots(); ++i)
      if (spots[i].slide_id == slide_id) out.push_back(i);
    return out;
  }
};

struct SlideCount {
  std::string slide_id;
  Eigen::Index num_spots = 0;
};

struct DatasetManifest {
  int format_version = 1;
  Eigen::Index num_spots = 0;
  Eigen::Index num_genes = 0;
  std::vector<SlideCount> slides;
  bool normalization_applied = false;
  bool genes_selected = false;
  bool completed = false;
};

inline void validate_dataset(const Dataset& ds) {
  const Eigen::Index n = ds.num_spots(), g = ds.num_genes();
  if (n < 1) throw ValidationError("dataset has no spots");
  if (g < 1) throw ValidationError("dataset has no genes");
  auto shape_check = [&](Eigen::Index rows, Eigen::Index cols, const char* name) {
    if (rows != n || cols != g)
      throw ValidationError(std::string("shape mismatch: ") + name + " is " +
                            std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                            std::to_string(n) + "x" + std::to_string(g));
  };
  shape_check(ds.raw_counts.rows(), ds.raw_counts.cols(), "counts");
  shape_check(ds.expression.rows(), ds.expression.cols(), "expression");
  shape_check(ds.observed.rows(), ds.observed.cols(), "observed");

  std::set<std::string> gene_names(ds.genes.begin(), ds.genes.end());
  if (gene_names.size() != ds.genes.size()) throw ValidationError("duplicate gene name");

  std::set<std::tuple<std::string, int, int>> coords;
  std::set<std::pair<std::string, std::string>> ids;
  for (const auto& s : ds.spots) {
    if (s.array_row < 0 || s.array_col < 0)
      throw ValidationError("negative lattice coordinate for spot " + s.spot_id);
    if (!coords.insert({s.slide_id, s.array_row, s.array_col}).second)
      throw ValidationError("duplicate lattice position (" + s.slide_id + ", " +
                            std::to_string(s.array_row) + ", " + std::to_string(s.array_col) + ")");
    if (!ids.insert({s.slide_id, s.spot_id}).second)
      throw ValidationError("duplicate spot id " + s.spot_id + " on slide " + s.slide_id);
    if (ds.split.find(s.slide_id) == ds.split.end())
      throw ValidationError("slide " + s.slide_id + " missing from split assignment");
  }

  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < g; ++j) {
      if (ds.raw_counts(i, j) < 0)
        throw ValidationError("negative raw count at spot " + ds.spots[i].spot_id + ", gene " +
                              ds.genes[j]);
      if (!std::isfinite(ds.expression(i, j)))
        throw ValidationError("non-finite expression at spot " + ds.spots[i].spot_id + ", gene " +
                              ds.genes[j]);
      if (!ds.completed && !ds.observed(i, j) && ds.expression(i, j) != 0.0)
        throw ValidationError("unobserved entry without 0.0 sentinel at spot " +
                              ds.spots[i].spot_id + ", gene " + ds.genes[j]);
    }
}

inline DatasetManifest make_manifest(const Dataset& ds) {
  DatasetManifest m;
  m.num_spots = ds.num_spots();
  m.num_genes = ds.num_genes();
  for (const auto& id : ds.slide_ids()) {
    SlideCount sc;
    sc.slide_id = id;
    sc.num_spots = static_cast<Eigen::Index>(ds.spots_on_slide(id).size());
    m.slides.push_back(sc);
  }
  m.normalization_applied = ds.normalization_applied;
  m.genes_selected = ds.genes_selected;
  m.completed = ds.completed;
  return m;
}

namespace detail {

inline void write_matrix_tsv(const std::filesystem::path& path, const Dataset& ds,
                             const std::function<std::string(Eigen::Index, Eigen::Index)>& cell) {
  TsvWriter w(path.string());
  w.row(ds.genes);
  std::vector<std::string> cells(static_cast<std::size_t>(ds.num_genes()));
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i) {
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j) cells[static_cast<std::size_t>(j)] = cell(i, j);
    w.row(cells);
  }
  w.close();
}

inline void check_field(const std::string& value, const char* what) {
  if (value.find('\t') != std::string::npos || value.find('\n') != std::string::npos)
    throw ValidationError(std::string(what) + " contains tab or newline: '" + value + "'");
  if (value.empty()) throw ValidationError(std::string(what) + " is empty");
}

}  // namespace detail

// Writes manifest.json, spots.tsv, genes.txt, counts.tsv, expression.tsv and
// observed.tsv under root. Floats are serialized in shortest round-trip
// form, so load_dataset(save_dataset(d)) == d bit-exactly.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& root) {
  validate_dataset(ds);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create directory " + root.string() + ": " + ec.message());

  DatasetManifest m = make_manifest(ds);
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["num_spots"] = m.num_spots;
  j["num_genes"] = m.num_genes;
  j["slides"] = nlohmann::json::array();
  for (const auto& sc : m.slides) j["slides"].push_back({{"slide_id", sc.slide_id}, {"num_spots", sc.num_spots}});
  j["normalization_applied"] = m.normalization_applied;
  j["genes_selected"] = m.genes_selected;
  j["completed"] = m.completed;
  {
    std::ofstream out(root / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot open " + (root / "manifest.json").string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failure on manifest.json");
  }

  {
    TsvWriter w((root / "spots.tsv").string());
    w.row({"spot_id", "slide_id", "array_row", "array_col", "pixel_x", "pixel_y", "split"});
    for (const auto& s : ds.spots) {
      detail::check_field(s.spot_id, "spot_id");
      detail::check_field(s.slide_id, "slide_id");
      w.row({s.spot_id, s.slide_id, std::to_string(s.array_row), std::to_string(s.array_col),
             format_double(s.pixel_x), format_double(s.pixel_y),
             to_string(ds.split.at(s.slide_id))});
    }
    w.close();
  }

  {
    std::ofstream out(root / "genes.txt", std::ios::binary);
    if (!out) throw IoError("cannot open " + (root / "genes.txt").string() + " for writing");
    for (const auto& gname : ds.genes) {
      detail::check_field(gname, "gene name");
      out << gname << "\n";
    }
    if (!out) throw IoError("write failure on genes.txt");
  }

  detail::write_matrix_tsv(root / "counts.tsv", ds,
                           [&](Eigen::Index i, Eigen::Index j) { return std::to_string(ds.raw_counts(i, j)); });
  detail::write_matrix_tsv(root / "expression.tsv", ds,
                           [&](Eigen::Index i, Eigen::Index j) { return format_double(ds.expression(i, j)); });
  detail::write_matrix_tsv(root / "observed.tsv", ds,
                           [&](Eigen::Index i, Eigen::Index j) { return ds.observed(i, j) ? "1" : "0"; });
}

struct LoadOptions {
  // Import convenience for sources without an explicit mask: when
  // observed.tsv is absent, derive observed = (count > 0).
  bool zeros_are_missing = false;
};

inline Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& opts = {}) {
  auto require = [&](const char* name) {
    auto p = root / name;
    if (!std::filesystem::exists(p)) throw ValidationError("missing file " + p.string());
    return p;
  };

  nlohmann::json j;
  {
    std::ifstream in(require("manifest.json"), std::ios::binary);
    if (!in) throw IoError("cannot open manifest.json");
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed manifest.json: ") + e.what());
    }
  }
  Dataset ds;
  Eigen::Index want_spots = 0, want_genes = 0;
  std::vector<SlideCount> want_slides;
  try {
    if (j.at("format_version").get<int>() != 1)
      throw ValidationError("unsupported format_version in manifest.json");
    want_spots = j.at("num_spots").get<Eigen::Index>();
    want_genes = j.at("num_genes").get<Eigen::Index>();
    for (const auto& s : j.at("slides"))
      want_slides.push_back({s.at("slide_id").get<std::string>(), s.at("num_spots").get<Eigen::Index>()});
    ds.normalization_applied = j.at("normalization_applied").get<bool>();
    ds.genes_selected = j.at("genes_selected").get<bool>();
    ds.completed = j.value("completed", false);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest.json missing field: ") + e.what());
  }

  {
    TsvTable t = read_tsv(require("spots.tsv").string());
    const std::vector<std::string> want_header = {"spot_id", "slide_id", "array_row",
                                                  "array_col", "pixel_x", "pixel_y", "split"};
    if (t.header != want_header) throw ValidationError("unexpected header in spots.tsv");
    std::map<std::string, Split> slide_split;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const auto& row = t.rows[r];
      if (row.size() != 7) throw ValidationError("spots.tsv row " + std::to_string(r + 2) + " has wrong column count");
      SpotRecord s;
      s.spot_id = row[0];
      s.slide_id = row[1];
      s.array_row = static_cast<int>(parse_int(row[2], "spots.tsv array_row"));
      s.array_col = static_cast<int>(parse_int(row[3], "spots.tsv array_col"));
      s.pixel_x = parse_double(row[4], "spots.tsv pixel_x");
      s.pixel_y = parse_double(row[5], "spots.tsv pixel_y");
      Split sp = split_from_string(row[6]);
      auto it = slide_split.find(s.slide_id);
      if (it == slide_split.end())
        slide_split.emplace(s.slide_id, sp);
      else if (it->second != sp)
        throw ValidationError("slide " + s.slide_id + " has conflicting split labels");
      ds.spots.push_back(std::move(s));
    }
    ds.split = std::move(slide_split);
  }

  {
    std::ifstream in(require("genes.txt"), std::ios::binary);
    if (!in) throw IoError("cannot open genes.txt");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) ds.genes.push_back(line);
    }
  }

  const Eigen::Index n = ds.num_spots(), g = ds.num_genes();
  if (n != want_spots)
    throw ValidationError("manifest num_spots=" + std::to_string(want_spots) +
                          " but spots.tsv has " + std::to_string(n) + " rows");
  if (g != want_genes)
    throw ValidationError("manifest num_genes=" + std::to_string(want_genes) +
                          " but genes.txt has " + std::to_string(g) + " entries");
  {
    std::map<std::string, Eigen::Index> counts;
    for (const auto& s : ds.spots) counts[s.slide_id]++;
    if (counts.size() != want_slides.size())
      throw ValidationError("manifest slide list does not match spots.tsv");
    for (const auto& sc : want_slides) {
      auto it = counts.find(sc.slide_id);
      if (it == counts.end() || it->second != sc.num_spots)
        throw ValidationError("manifest spot count for slide " + sc.slide_id +
                              " does not match spots.tsv");
    }
  }

  auto read_matrix = [&](const std::filesystem::path& p, auto&& cell) {
    TsvTable t = read_tsv(p.string());
    if (static_cast<Eigen::Index>(t.header.size()) != g || !std::equal(ds.genes.begin(), ds.genes.end(), t.header.begin()))
      throw ValidationError(p.filename().string() + " header does not match genes.txt");
    if (static_cast<Eigen::Index>(t.rows.size()) != n)
      throw ValidationError("shape mismatch: " + p.filename().string() + " has " +
                            std::to_string(t.rows.size()) + " rows, expected " + std::to_string(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (static_cast<Eigen::Index>(t.rows[static_cast<std::size_t>(i)].size()) != g)
        throw ValidationError("shape mismatch: " + p.filename().string() + " row " +
                              std::to_string(i + 2) + " has wrong column count");
      for (Eigen::Index jj = 0; jj < g; ++jj)
        cell(i, jj, t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(jj)]);
    }
  };

  ds.raw_counts.resize(n, g);
  read_matrix(root / "counts.tsv", [&](Eigen::Index i, Eigen::Index jj, const std::string& s) {
    ds.raw_counts(i, jj) = parse_int(s, "counts.tsv");
  });
  ds.expression.resize(n, g);
  read_matrix(root / "expression.tsv", [&](Eigen::Index i, Eigen::Index jj, const std::string& s) {
    ds.expression(i, jj) = parse_double(s, "expression.tsv");
  });
  ds.observed.resize(n, g);
  if (std::filesystem::exists(root / "observed.tsv")) {
    read_matrix(root / "observed.tsv", [&](Eigen::Index i, Eigen::Index jj, const std::string& s) {
      if (s == "0")
        ds.observed(i, jj) = 0;
      else if (s == "1")
        ds.observed(i, jj) = 1;
      else
        throw ValidationError("observed.tsv entries must be 0 or 1, got '" + s + "'");
    });
  } else if (opts.zeros_are_missing) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index jj = 0; jj < g; ++jj) ds.observed(i, jj) = ds.raw_counts(i, jj) > 0 ? 1 : 0;
  } else {
    throw ValidationError("missing file " + (root / "observed.tsv").string() +
                          " (pass zeros_are_missing to derive it from counts)");
  }

  validate_dataset(ds);
  return ds;
}

inline bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.spots.size() != b.spots.size() || a.genes != b.genes || a.split != b.split) return false;
  for (std::size_t i = 0; i < a.spots.size(); ++i) {
    const auto& x = a.spots[i];
    const auto& y = b.spots[i];
    if (x.spot_id != y.spot_id || x.slide_id != y.slide_id || x.array_row != y.array_row ||
        x.array_col != y.array_col || x.pixel_x != y.pixel_x || x.pixel_y != y.pixel_y)
      return false;
  }
  return a.raw_counts == b.raw_counts && a.expression == b.expression && a.observed == b.observed &&
         a.normalization_applied == b.normalization_applied && a.genes_selected == b.genes_selected &&
         a.completed == b.completed;
}

}  // namespace spackle
