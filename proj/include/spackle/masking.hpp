#pragma once

#include "spackle/block.hpp"
#include "spackle/rng.hpp"

namespace spackle {

// Binary keep/mask matrix over a block. keep(j, c) == 0 means the entry is
// zeroed before entering the model. Training masks (sample_mask) only ever
// mask originally-observed entries; inference masks (inference_mask) mark
// the originally-missing entries instead.
struct MaskSpec {
  BoolMatrix keep;  // [g x 19], 1 = keep
  double rho = 0.0;
};

// Independent Bernoulli(rho) masking restricted to positions whose
// real_mask is set; median-completed and padded entries are never masked.
// Entries are drawn row-major (gene, then column) so a given rng seed
// always yields the same mask.
inline MaskSpec sample_mask(const ExpressionBlock& block, double rho, SplitMix64& rng) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("rho must be in [0, 1]");
  MaskSpec m;
  m.rho = rho;
  m.keep.setConstant(block.values.rows(), block.values.cols(), 1);
  for (Eigen::Index j = 0; j < block.values.rows(); ++j)
    for (Eigen::Index c = 0; c < block.values.cols(); ++c)
      if (block.real_mask(j, c) && rng.bernoulli(rho)) m.keep(j, c) = 0;
  return m;
}

inline MaskSpec sample_mask(const ExpressionBlock& block, double rho, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return sample_mask(block, rho, rng);
}

// Hadamard product of the block values with the 0/1 keep matrix.
inline Eigen::MatrixXd apply_mask(const Eigen::MatrixXd& values, const MaskSpec& mask) {
  if (values.rows() != mask.keep.rows() || values.cols() != mask.keep.cols())
    throw ValidationError("mask shape does not match block");
  return values.cwiseProduct(mask.keep.cast<double>());
}

inline Eigen::MatrixXd apply_mask(const ExpressionBlock& block, const MaskSpec& mask) {
  return apply_mask(block.values, mask);
}

// Inference-time mask: zero exactly the present entries that were
// originally unobserved, so the model reconstructs them; padded slots stay
// kept (their values are zero anyway).
inline MaskSpec inference_mask(const ExpressionBlock& block) {
  MaskSpec m;
  m.rho = 0.0;
  m.keep.setConstant(block.values.rows(), block.values.cols(), 1);
  for (Eigen::Index c = 0; c < block.values.cols(); ++c) {
    if (!block.presence[static_cast<std::size_t>(c)]) continue;
    for (Eigen::Index j = 0; j < block.values.rows(); ++j)
      if (!block.real_mask(j, c)) m.keep(j, c) = 0;
  }
  return m;
}

}  // namespace spackle
