#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "spackle/train.hpp"

namespace spackle {

enum class Method { spackle, median };

inline const char* to_string(Method m) { return m == Method::spackle ? "spackle" : "median"; }

// Metrics over synthetically masked, originally-observed entries. PCC is
// computed per gene across its masked entries and averaged over genes with
// at least two of them; genes with a degenerate correlation (zero variance
// on either side) contribute 0, genes with fewer than two entries are
// excluded and hold NaN in per_gene_pcc.
struct EvalReport {
  Method method = Method::spackle;
  double rho = 0.0;
  bool natural = false;  // true when evaluating the original missing values
  double mse = 0.0;
  double pcc = 0.0;
  Eigen::VectorXd per_gene_pcc;
  long long num_evaluated_entries = 0;
  std::uint64_t mask_checksum = 0;
};

// Dataset-level synthetic corruption: every originally-observed entry on
// the chosen split's slides is masked independently with probability rho.
// Entries are drawn from one stream in (spot, gene) order, so a given
// (dataset, split, rho, seed) yields one fixed mask.
struct CorruptionMask {
  BoolMatrix corrupted;  // [num_spots x g]; 1 = synthetically masked
  std::vector<std::pair<Eigen::Index, Eigen::Index>> entries;
  std::uint64_t checksum = 0;
};

inline CorruptionMask sample_corruption(const Dataset& ds, Split split, double rho,
                                        std::uint64_t seed) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("corruption rho must be in (0, 1]");
  CorruptionMask mask;
  mask.corrupted.setZero(ds.num_spots(), ds.num_genes());
  SplitMix64 rng(derive_seed({seed, seed_tag::corrupt}));
  std::uint64_t checksum = 0xcbf29ce484222325ULL;  // FNV-1a over entry codes
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i) {
    auto it = ds.split.find(ds.spots[static_cast<std::size_t>(i)].slide_id);
    if (it == ds.split.end() || it->second != split) continue;
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j) {
      if (!ds.observed(i, j)) continue;
      if (!rng.bernoulli(rho)) continue;
      mask.corrupted(i, j) = 1;
      mask.entries.emplace_back(i, j);
      checksum ^= static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(ds.num_genes()) +
                  static_cast<std::uint64_t>(j);
      checksum *= 0x100000001b3ULL;
    }
  }
  mask.checksum = checksum;
  return mask;
}

namespace detail {

struct GeneAccumulator {
  std::vector<double> pred, truth;
};

inline void finish_metrics(EvalReport& report, const std::vector<GeneAccumulator>& per_gene,
                           double sq_sum, long long n) {
  report.num_evaluated_entries = n;
  report.mse = sq_sum / static_cast<double>(n);
  report.per_gene_pcc.setConstant(static_cast<Eigen::Index>(per_gene.size()),
                                  std::numeric_limits<double>::quiet_NaN());
  double pcc_sum = 0.0;
  long long eligible = 0;
  for (std::size_t j = 0; j < per_gene.size(); ++j) {
    const auto& acc = per_gene[j];
    if (acc.pred.size() < 2) continue;
    ++eligible;
    double mp = 0, mt = 0;
    const double k = static_cast<double>(acc.pred.size());
    for (std::size_t i = 0; i < acc.pred.size(); ++i) {
      mp += acc.pred[i];
      mt += acc.truth[i];
    }
    mp /= k;
    mt /= k;
    double spp = 0, stt = 0, spt = 0;
    for (std::size_t i = 0; i < acc.pred.size(); ++i) {
      double dp = acc.pred[i] - mp, dt = acc.truth[i] - mt;
      spp += dp * dp;
      stt += dt * dt;
      spt += dp * dt;
    }
    double r = (spp > 0.0 && stt > 0.0) ? spt / std::sqrt(spp * stt) : 0.0;
    report.per_gene_pcc(static_cast<Eigen::Index>(j)) = r;
    pcc_sum += r;
  }
  report.pcc = eligible > 0 ? pcc_sum / static_cast<double>(eligible) : 0.0;
}

// Model predictions at the corrupted entries: blocks are built from the
// completed dataset and the input mask zeroes exactly the synthetically
// corrupted entries, mirroring the training-time masking distribution
// (median-completed fills stay visible, as during training). The
// reconstruction is read off the center token.
template <typename T>
void spackle_predictions(const Checkpoint<T>& ckpt, const Dataset& ds,
                         const CompletionProvenance& prov, const CorruptionMask& corruption,
                         const std::vector<Eigen::Index>& spots, int threads,
                         Eigen::MatrixXd& pred) {
  BlockBuilder builder(ds, prov);
  const Eigen::Index g = ds.num_genes();
  const int chunk = 32;
  const int nchunks = static_cast<int>((spots.size() + chunk - 1) / chunk);
  std::vector<EncoderActivations<T>> acts(static_cast<std::size_t>(resolve_threads(threads)));
  std::vector<TokenBatch<T>> batches(acts.size());

  parallel_for(nchunks, threads, [&](int ci, int worker) {
    const std::size_t lo = static_cast<std::size_t>(ci) * chunk;
    const std::size_t hi = std::min(spots.size(), lo + chunk);
    std::vector<ExpressionBlock> blocks;
    std::vector<MaskSpec> masks;
    blocks.reserve(hi - lo);
    masks.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      blocks.push_back(builder.build(spots[i]));
      const ExpressionBlock& b = blocks.back();
      MaskSpec m;
      m.rho = 0.0;
      m.keep.setConstant(g, b.values.cols(), 1);
      for (Eigen::Index c = 0; c < b.values.cols(); ++c) {
        Eigen::Index nb = b.spot_ordinals[static_cast<std::size_t>(c)];
        if (nb < 0) continue;
        for (Eigen::Index j = 0; j < g; ++j)
          if (corruption.corrupted(nb, j)) m.keep(j, c) = 0;
      }
      masks.push_back(std::move(m));
    }
    std::vector<const ExpressionBlock*> bl;
    std::vector<const MaskSpec*> ms;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      bl.push_back(&blocks[i]);
      ms.push_back(&masks[i]);
    }
    auto& batch = batches[static_cast<std::size_t>(worker)];
    detail::fill_token_batch(bl, ms, 0, batch);
    encoder_forward(ckpt.params, batch, acts[static_cast<std::size_t>(worker)]);
    const auto& e_hat = acts[static_cast<std::size_t>(worker)].e_hat;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Eigen::Index row = batch.block_start[static_cast<std::size_t>(i)];
      const Eigen::Index spot = spots[lo + i];
      for (Eigen::Index j = 0; j < g; ++j)
        if (corruption.corrupted(spot, j)) pred(spot, j) = static_cast<double>(e_hat(row, j));
    }
  });
}

}  // namespace detail

// Evaluates both completion methods on identical synthetic corruption of
// the chosen split. The median method re-runs the adaptive filter on the
// corrupted data; the model sees blocks whose corrupted and originally
// missing entries are zeroed. Metrics are computed exclusively on the
// masked originally-observed entries.
template <typename T>
std::pair<EvalReport, EvalReport> evaluate_pair(const Checkpoint<T>& ckpt, const Dataset& ds,
                                                const CompletionProvenance& prov, Split split,
                                                double rho, std::uint64_t seed, int threads = 0,
                                                int max_radius_hops = 4) {
  if (!ds.completed) throw ValidationError("evaluate requires a median-completed dataset");
  check_provenance(ds, prov);
  if (ckpt.config.num_genes != ds.num_genes())
    throw ValidationError("checkpoint num_genes does not match dataset");

  CorruptionMask corruption = sample_corruption(ds, split, rho, seed);
  if (corruption.entries.empty())
    throw ValidationError("no maskable entries in split at rho=" + format_double(rho));
  for (const auto& [i, j] : corruption.entries)
    if (!ds.observed(i, j) || prov.at(i, j) != Source::observed)
      throw ValidationError("internal: corruption touched a non-observed entry");

  // Revert completion fills, then apply the corruption, then re-complete:
  // the median method must not see the values it is asked to restore.
  Dataset damaged = ds;
  damaged.completed = false;
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
    for (Eigen::Index j = 0; j < ds.num_genes(); ++j)
      if (prov.at(i, j) != Source::observed) damaged.expression(i, j) = 0.0;
  for (const auto& [i, j] : corruption.entries) {
    damaged.observed(i, j) = 0;
    damaged.expression(i, j) = 0.0;
  }
  auto [median_ds, median_prov] = median_complete(damaged, max_radius_hops);

  std::vector<Eigen::Index> spots = ds.spots_in_split(split);
  Eigen::MatrixXd model_pred = Eigen::MatrixXd::Zero(ds.num_spots(), ds.num_genes());
  detail::spackle_predictions(ckpt, ds, prov, corruption, spots, threads, model_pred);

  const Eigen::Index g = ds.num_genes();
  std::vector<detail::GeneAccumulator> acc_model(static_cast<std::size_t>(g));
  std::vector<detail::GeneAccumulator> acc_median(static_cast<std::size_t>(g));
  double sq_model = 0.0, sq_median = 0.0;
  for (const auto& [i, j] : corruption.entries) {
    const double truth = ds.expression(i, j);
    const double pm = model_pred(i, j);
    const double pd = median_ds.expression(i, j);
    sq_model += (pm - truth) * (pm - truth);
    sq_median += (pd - truth) * (pd - truth);
    acc_model[static_cast<std::size_t>(j)].pred.push_back(pm);
    acc_model[static_cast<std::size_t>(j)].truth.push_back(truth);
    acc_median[static_cast<std::size_t>(j)].pred.push_back(pd);
    acc_median[static_cast<std::size_t>(j)].truth.push_back(truth);
  }

  EvalReport model_report, median_report;
  model_report.method = Method::spackle;
  median_report.method = Method::median;
  model_report.rho = median_report.rho = rho;
  model_report.mask_checksum = median_report.mask_checksum = corruption.checksum;
  const long long n = static_cast<long long>(corruption.entries.size());
  detail::finish_metrics(model_report, acc_model, sq_model, n);
  detail::finish_metrics(median_report, acc_median, sq_median, n);
  return {model_report, median_report};
}

// The spackle-method report alone.
template <typename T>
EvalReport evaluate(const Checkpoint<T>& ckpt, const Dataset& ds, const CompletionProvenance& prov,
                    Split split, double rho, std::uint64_t seed, int threads = 0) {
  return evaluate_pair(ckpt, ds, prov, split, rho, seed, threads).first;
}

// One (spackle, median) report pair per rho; both methods share the same
// corruption mask per rho (checksums agree). The per-rho corruption seed is
// derive_seed({seed, rho_index}).
template <typename T>
std::vector<std::pair<EvalReport, EvalReport>> corruption_sweep(
    const Checkpoint<T>& ckpt, const Dataset& ds, const CompletionProvenance& prov, Split split,
    const std::vector<double>& rhos, std::uint64_t seed, int threads = 0) {
  if (rhos.empty()) throw ValidationError("sweep needs at least one rho");
  std::vector<std::pair<EvalReport, EvalReport>> out;
  for (std::size_t i = 0; i < rhos.size(); ++i)
    out.push_back(evaluate_pair(ckpt, ds, prov, split, rhos[i],
                                derive_seed({seed, static_cast<std::uint64_t>(i)}), threads));
  return out;
}

// Applies the piecewise completion rule across the whole dataset: every
// originally-missing entry is replaced by the model reconstruction under
// the inference mask (observed entries pass through untouched) and its
// provenance becomes `model`.
template <typename T>
std::pair<Dataset, CompletionProvenance> model_complete(const Checkpoint<T>& ckpt,
                                                        const Dataset& ds,
                                                        const CompletionProvenance& prov,
                                                        int threads = 0) {
  if (!ds.completed) throw ValidationError("model_complete requires a median-completed dataset");
  check_provenance(ds, prov);
  if (ckpt.config.num_genes != ds.num_genes())
    throw ValidationError("checkpoint num_genes does not match dataset");

  std::vector<Eigen::Index> spots;
  for (Eigen::Index i = 0; i < ds.num_spots(); ++i) spots.push_back(i);

  BlockBuilder builder(ds, prov);
  const Eigen::Index g = ds.num_genes();
  Dataset out = ds;
  CompletionProvenance out_prov = prov;
  const int chunk = 32;
  const int nchunks = static_cast<int>((spots.size() + chunk - 1) / chunk);
  std::vector<EncoderActivations<T>> acts(static_cast<std::size_t>(resolve_threads(threads)));
  std::vector<TokenBatch<T>> batches(acts.size());
  parallel_for(nchunks, threads, [&](int ci, int worker) {
    const std::size_t lo = static_cast<std::size_t>(ci) * chunk;
    const std::size_t hi = std::min(spots.size(), lo + chunk);
    std::vector<ExpressionBlock> blocks;
    std::vector<MaskSpec> masks;
    for (std::size_t i = lo; i < hi; ++i) {
      blocks.push_back(builder.build(spots[i]));
      masks.push_back(inference_mask(blocks.back()));
    }
    std::vector<const ExpressionBlock*> bl;
    std::vector<const MaskSpec*> ms;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      bl.push_back(&blocks[i]);
      ms.push_back(&masks[i]);
    }
    auto& batch = batches[static_cast<std::size_t>(worker)];
    detail::fill_token_batch(bl, ms, 0, batch);
    encoder_forward(ckpt.params, batch, acts[static_cast<std::size_t>(worker)]);
    const auto& e_hat = acts[static_cast<std::size_t>(worker)].e_hat;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Eigen::Index row = batch.block_start[static_cast<std::size_t>(i)];
      const Eigen::Index spot = spots[lo + i];
      for (Eigen::Index j = 0; j < g; ++j)
        if (prov.at(spot, j) != Source::observed) {
          out.expression(spot, j) = static_cast<double>(e_hat(row, j));
          out_prov.set(spot, j, Source::model);
        }
    }
  });
  return {std::move(out), std::move(out_prov)};
}

struct LrSearchRow {
  double learning_rate = 0.0;
  double val_mse = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
};

struct LrSearchResult {
  double best_learning_rate = 0.0;
  std::vector<LrSearchRow> rows;
};

// Shortened-budget grid search over learning rates with a shared seed.
// Diverged candidates are flagged and excluded; ties break toward the
// smaller learning rate.
template <typename T = float>
LrSearchResult lr_search(const Dataset& ds, const CompletionProvenance& prov,
                         const ModelConfig& model_config, const TrainConfig& base,
                         const std::vector<double>& grid, long long budget_iterations = 1000) {
  if (grid.empty()) throw ValidationError("learning-rate grid is empty");
  LrSearchResult result;
  for (double lr : grid) {
    TrainConfig cfg = base;
    cfg.learning_rate = lr;
    cfg.max_iterations = budget_iterations;
    LrSearchRow row;
    row.learning_rate = lr;
    try {
      TrainResult<T> r = train<T>(ds, prov, model_config, cfg);
      row.val_mse = r.best.best_val_mse;
      row.diverged = !std::isfinite(row.val_mse);
    } catch (const NumericError&) {
      row.diverged = true;
    }
    result.rows.push_back(row);
  }
  bool found = false;
  double best_mse = std::numeric_limits<double>::infinity();
  for (const auto& row : result.rows) {
    if (row.diverged) continue;
    if (!found || row.val_mse < best_mse ||
        (row.val_mse == best_mse && row.learning_rate < result.best_learning_rate)) {
      found = true;
      best_mse = row.val_mse;
      result.best_learning_rate = row.learning_rate;
    }
  }
  if (!found) throw ValidationError("all learning-rate candidates diverged");
  return result;
}

}  // namespace spackle
