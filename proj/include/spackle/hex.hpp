#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "spackle/dataset.hpp"
#include "spackle/errors.hpp"

namespace spackle {

// Lattice convention: Visium-style offset coordinates with odd rows shifted
// half a step east ("odd-r"). All distance and ring logic runs in axial
// coordinates; the conversion below is the single place the convention lives.
enum class LatticeParity { odd_r };

struct Axial {
  int q = 0;
  int r = 0;
  friend bool operator==(const Axial&, const Axial&) = default;
};

inline Axial axial_from_offset(int row, int col) {
  // (row - (row & 1)) is even for any sign, so the division is exact.
  return Axial{col - (row - (row & 1)) / 2, row};
}

inline std::pair<int, int> offset_from_axial(Axial a) {
  return {a.r, a.q + (a.r - (a.r & 1)) / 2};
}

inline int hex_distance(Axial a, Axial b) {
  int dq = a.q - b.q;
  int dr = a.r - b.r;
  int ds = -dq - dr;
  int adq = dq < 0 ? -dq : dq;
  int adr = dr < 0 ? -dr : dr;
  int ads = ds < 0 ? -ds : ds;
  return (adq + adr + ads) / 2;
}

// Axial step directions in canonical clockwise order starting due east
// (screen convention: rows grow downward): E, SE, SW, W, NW, NE.
inline constexpr std::array<Axial, 6> kHexDirections = {
    Axial{1, 0}, Axial{0, 1}, Axial{-1, 1}, Axial{-1, 0}, Axial{0, -1}, Axial{1, -1}};

// Cells at hex distance exactly `radius`, clockwise starting at the due-east
// cell. 6*radius entries. The walk starts at center + radius*E and moves
// SW, W, NW, NE, E, SE for `radius` steps each.
inline std::vector<Axial> axial_ring(Axial center, int radius) {
  std::vector<Axial> out;
  if (radius <= 0) return out;
  out.reserve(static_cast<std::size_t>(6 * radius));
  Axial cur{center.q + radius, center.r};
  static constexpr std::array<int, 6> walk = {2, 3, 4, 5, 0, 1};  // indices into kHexDirections
  for (int leg : walk)
    for (int step = 0; step < radius; ++step) {
      out.push_back(cur);
      cur.q += kHexDirections[static_cast<std::size_t>(leg)].q;
      cur.r += kHexDirections[static_cast<std::size_t>(leg)].r;
    }
  return out;
}

// Per-slide map from (array_row, array_col) to dataset spot ordinal.
// Built once, immutable afterwards.
class HexIndex {
 public:
  static HexIndex build(const Dataset& ds, const std::string& slide_id) {
    HexIndex idx;
    idx.slide_id_ = slide_id;
    for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
      if (ds.spots[static_cast<std::size_t>(i)].slide_id == slide_id) {
        const auto& s = ds.spots[static_cast<std::size_t>(i)];
        idx.map_.emplace(key(s.array_row, s.array_col), i);
      }
    return idx;
  }

  std::optional<Eigen::Index> find(int row, int col) const {
    auto it = map_.find(key(row, col));
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(int row, int col) const { return map_.contains(key(row, col)); }
  std::size_t size() const { return map_.size(); }
  const std::string& slide_id() const { return slide_id_; }
  LatticeParity parity() const { return LatticeParity::odd_r; }

 private:
  static std::uint64_t key(int row, int col) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(row)) << 32) |
           static_cast<std::uint64_t>(static_cast<std::uint32_t>(col));
  }
  std::string slide_id_;
  std::unordered_map<std::uint64_t, Eigen::Index> map_;
};

// Indexes for every slide of a dataset, keyed by slide id.
class SlideIndexes {
 public:
  explicit SlideIndexes(const Dataset& ds) {
    for (const auto& id : ds.slide_ids()) indexes_.emplace(id, HexIndex::build(ds, id));
  }
  const HexIndex& at(const std::string& slide_id) const {
    auto it = indexes_.find(slide_id);
    if (it == indexes_.end()) throw ValidationError("no hex index for slide " + slide_id);
    return it->second;
  }

 private:
  std::map<std::string, HexIndex> indexes_;
};

// Existing spots at hex distance 1..hops from (row, col), ring by ring,
// each ring clockwise from the due-east neighbor. Absent lattice positions
// are skipped. 6 entries for hops=1 and 18 for hops=2 on a full interior
// lattice.
inline std::vector<Eigen::Index> hex_neighbors(const HexIndex& index, int row, int col, int hops) {
  if (hops < 1 || hops > 2) throw ValidationError("hops must be 1 or 2");
  if (!index.contains(row, col))
    throw ValidationError("unknown center coordinate (" + std::to_string(row) + ", " +
                          std::to_string(col) + ") on slide " + index.slide_id());
  std::vector<Eigen::Index> out;
  Axial center = axial_from_offset(row, col);
  for (int radius = 1; radius <= hops; ++radius)
    for (Axial a : axial_ring(center, radius)) {
      auto [r, c] = offset_from_axial(a);
      if (auto ord = index.find(r, c)) out.push_back(*ord);
    }
  return out;
}

// The 18 canonical 2-hop slot positions around a center, with the spot
// ordinal where one exists. Slot order matches hex_neighbors.
inline std::array<std::optional<Eigen::Index>, 18> neighbor_slots(const HexIndex& index, int row,
                                                                  int col) {
  std::array<std::optional<Eigen::Index>, 18> slots;
  Axial center = axial_from_offset(row, col);
  std::size_t slot = 0;
  for (int radius = 1; radius <= 2; ++radius)
    for (Axial a : axial_ring(center, radius)) {
      auto [r, c] = offset_from_axial(a);
      slots[slot++] = index.find(r, c);
    }
  return slots;
}

// Ring-by-ring neighbor ordinals out to max_radius, used by the adaptive
// median filter. rings[k] holds existing spots at distance exactly k+1.
inline std::vector<std::vector<Eigen::Index>> neighbor_rings(const HexIndex& index, int row,
                                                             int col, int max_radius) {
  std::vector<std::vector<Eigen::Index>> rings;
  Axial center = axial_from_offset(row, col);
  for (int radius = 1; radius <= max_radius; ++radius) {
    std::vector<Eigen::Index> ring;
    for (Axial a : axial_ring(center, radius)) {
      auto [r, c] = offset_from_axial(a);
      if (auto ord = index.find(r, c)) ring.push_back(*ord);
    }
    rings.push_back(std::move(ring));
  }
  return rings;
}

}  // namespace spackle
