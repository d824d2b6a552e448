#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "spackle/dataset.hpp"
#include "spackle/rng.hpp"

namespace spackle {

// Desk-scale synthetic datasets: per slide, each gene is a smooth random
// field over the hex lattice (a sum of three seeded sinusoids with
// wavelengths in [smoothness_length, 2*smoothness_length)), shifted to
// nonnegative values and discretized into raw counts. Entries are then
// independently dropped out with probability dropout_rate. Pure function
// of its arguments: every random draw comes from a SplitMix64 stream whose
// seed is derived from (seed, stream tag, slide, gene).
inline Dataset generate_synthetic(int num_slides, int rows, int cols, int g, double dropout_rate,
                                  double smoothness_length, std::uint64_t seed) {
  if (num_slides < 1) throw ValidationError("num_slides must be >= 1");
  if (rows < 1 || cols < 1 || static_cast<long long>(rows) * cols < 25)
    throw ValidationError("slide must have rows*cols >= 25");
  if (g < 1) throw ValidationError("need at least one gene");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ValidationError("dropout_rate must be in [0, 1)");
  if (!(smoothness_length > 0.0)) throw ValidationError("smoothness_length must be > 0");

  constexpr double kCountScale = 40.0;
  constexpr double kPixelPitch = 100.0;
  const double row_pitch = std::numbers::sqrt3 / 2.0;

  Dataset ds;
  for (int j = 0; j < g; ++j) ds.genes.push_back("gene_" + std::to_string(j));

  const Eigen::Index n = static_cast<Eigen::Index>(num_slides) * rows * cols;
  ds.raw_counts.setZero(n, g);
  ds.expression.setZero(n, g);
  ds.observed.setConstant(n, g, 1);

  Eigen::Index spot = 0;
  for (int s = 0; s < num_slides; ++s) {
    const std::string slide_id = "slide_" + std::to_string(s);
    if (num_slides == 1)
      ds.split[slide_id] = Split::train;
    else if (num_slides == 2)
      ds.split[slide_id] = s == 0 ? Split::train : Split::val;
    else
      ds.split[slide_id] = static_cast<Split>(s % 3);

    const Eigen::Index slide_first = spot;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        SpotRecord rec;
        rec.slide_id = slide_id;
        rec.spot_id = slide_id + "_r" + std::to_string(r) + "_c" + std::to_string(c);
        rec.array_row = r;
        rec.array_col = c;
        rec.pixel_x = (c + 0.5 * (r & 1)) * kPixelPitch;
        rec.pixel_y = r * row_pitch * kPixelPitch;
        ds.spots.push_back(std::move(rec));
        ++spot;
      }

    for (int j = 0; j < g; ++j) {
      SplitMix64 rng(derive_seed({seed, seed_tag::field, static_cast<std::uint64_t>(s),
                                  static_cast<std::uint64_t>(j)}));
      struct Wave {
        double amp, kx, ky, phase;
      };
      Wave waves[3];
      double offset = 0.0;
      for (Wave& w : waves) {
        w.amp = rng.uniform(0.5, 1.0);
        double wavelength = smoothness_length * rng.uniform(1.0, 2.0);
        double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w.kx = 2.0 * std::numbers::pi / wavelength * std::cos(theta);
        w.ky = 2.0 * std::numbers::pi / wavelength * std::sin(theta);
        w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        offset += w.amp;
      }
      // 5% headroom above the field minimum keeps every count positive, so
      // no spot can end up with a zero library size.
      offset *= 1.05;
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          double x = c + 0.5 * (r & 1);
          double y = r * row_pitch;
          double v = offset;
          for (const Wave& w : waves) v += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
          ds.raw_counts(slide_first + static_cast<Eigen::Index>(r) * cols + c, j) =
              std::llround(v * kCountScale);
        }
    }

    if (dropout_rate > 0.0) {
      SplitMix64 drop(derive_seed({seed, seed_tag::dropout, static_cast<std::uint64_t>(s)}));
      for (Eigen::Index i = slide_first; i < spot; ++i)
        for (int j = 0; j < g; ++j)
          if (drop.bernoulli(dropout_rate)) {
            ds.observed(i, j) = 0;
            ds.raw_counts(i, j) = 0;
          }
    }
  }

  validate_dataset(ds);
  return ds;
}

}  // namespace spackle
