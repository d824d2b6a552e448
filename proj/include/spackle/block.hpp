#pragma once

#include <array>
#include <cstdint>

#include "spackle/dataset.hpp"
#include "spackle/hex.hpp"
#include "spackle/provenance.hpp"

namespace spackle {

// A center spot plus its 18-slot 2-hop neighborhood. Column 0 is the
// center; columns 1..18 follow the canonical ring order and are zero-padded
// (presence = 0) where the lattice position has no spot.
inline constexpr int kNeighborSlots = 18;
inline constexpr int kBlockColumns = kNeighborSlots + 1;

struct ExpressionBlock {
  Eigen::Index center = 0;
  Eigen::MatrixXd values;  // [g x 19]
  std::array<std::uint8_t, kBlockColumns> presence{};
  BoolMatrix real_mask;  // [g x 19], 1 = originally observed
  std::array<Eigen::Index, kBlockColumns> spot_ordinals{};  // -1 for padded slots

  Eigen::Index num_genes() const { return values.rows(); }
};

// Builds blocks against a fixed dataset/provenance pair; the per-slide hex
// indexes are constructed once. Safe to share across threads.
class BlockBuilder {
 public:
  BlockBuilder(const Dataset& ds, const CompletionProvenance& prov)
      : ds_(ds), prov_(prov), indexes_(ds) {
    check_provenance(ds, prov);
  }

  ExpressionBlock build(Eigen::Index spot) const {
    if (spot < 0 || spot >= ds_.num_spots()) throw ValidationError("spot ordinal out of range");
    const auto& rec = ds_.spots[static_cast<std::size_t>(spot)];
    const HexIndex& index = indexes_.at(rec.slide_id);

    ExpressionBlock b;
    b.center = spot;
    const Eigen::Index g = ds_.num_genes();
    b.values.setZero(g, kBlockColumns);
    b.real_mask.setZero(g, kBlockColumns);
    b.spot_ordinals.fill(-1);

    b.presence[0] = 1;
    b.spot_ordinals[0] = spot;
    b.values.col(0) = ds_.expression.row(spot).transpose();
    for (Eigen::Index j = 0; j < g; ++j)
      b.real_mask(j, 0) = prov_.at(spot, j) == Source::observed ? 1 : 0;

    auto slots = neighbor_slots(index, rec.array_row, rec.array_col);
    for (int s = 0; s < kNeighborSlots; ++s) {
      if (!slots[static_cast<std::size_t>(s)].has_value()) continue;
      Eigen::Index nb = *slots[static_cast<std::size_t>(s)];
      int col = s + 1;
      b.presence[static_cast<std::size_t>(col)] = 1;
      b.spot_ordinals[static_cast<std::size_t>(col)] = nb;
      b.values.col(col) = ds_.expression.row(nb).transpose();
      for (Eigen::Index j = 0; j < g; ++j)
        b.real_mask(j, col) = prov_.at(nb, j) == Source::observed ? 1 : 0;
    }
    return b;
  }

  const Dataset& dataset() const { return ds_; }
  const CompletionProvenance& provenance() const { return prov_; }

 private:
  const Dataset& ds_;
  const CompletionProvenance& prov_;
  SlideIndexes indexes_;
};

inline ExpressionBlock build_block(const Dataset& ds, const CompletionProvenance& prov,
                                   Eigen::Index spot) {
  return BlockBuilder(ds, prov).build(spot);
}

}  // namespace spackle
