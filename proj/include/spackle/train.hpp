#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "spackle/block.hpp"
#include "spackle/checkpoint.hpp"
#include "spackle/masking.hpp"
#include "spackle/model.hpp"
#include "spackle/optimizer.hpp"
#include "spackle/parallel.hpp"
#include "spackle/preprocess.hpp"

namespace spackle {

struct TrainConfig {
  int batch_size = 256;
  long long max_iterations = 10000;
  double learning_rate = 1e-3;
  double rho = 0.30;          // training mask probability
  long long val_every = 100;  // validation / checkpoint-selection cadence
  std::uint64_t seed = 0;
  int threads = 0;       // <= 0: hardware concurrency
  int chunk_blocks = 32;  // gradient-reduction granularity; fixed so results
                          // are independent of the worker count
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (max_iterations < 0) throw ValidationError("max_iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("rho must be in [0, 1]");
    if (val_every < 1) throw ValidationError("val_every must be >= 1");
    if (chunk_blocks < 1) throw ValidationError("chunk_blocks must be >= 1");
  }
};

struct MetricsRow {
  long long iteration = 0;
  double train_mse = std::numeric_limits<double>::quiet_NaN();
  double val_mse = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
struct TrainResult {
  Checkpoint<T> best;
  Checkpoint<T> final;
  long long best_iteration = 0;
  std::vector<MetricsRow> metrics;
};

namespace detail {

// Flattens blocks (optionally masked) into a token batch. block_coeff is
// left zeroed when total_blocks == 0 (inference-only batches).
template <typename T>
void fill_token_batch(const std::vector<const ExpressionBlock*>& blocks,
                      const std::vector<const MaskSpec*>& masks, Eigen::Index total_blocks,
                      TokenBatch<T>& batch) {
  const Eigen::Index nb = static_cast<Eigen::Index>(blocks.size());
  const Eigen::Index g = blocks.empty() ? 0 : blocks[0]->values.rows();
  Eigen::Index tokens = 0;
  for (const auto* b : blocks) tokens += b->values.cols();

  batch.input.resize(tokens, g);
  batch.target.resize(tokens, g);
  batch.presence.resize(static_cast<std::size_t>(tokens));
  batch.block_start.assign(1, 0);
  batch.block_coeff.assign(static_cast<std::size_t>(nb), T(0));

  Eigen::Index row = 0;
  for (Eigen::Index bi = 0; bi < nb; ++bi) {
    const ExpressionBlock& b = *blocks[static_cast<std::size_t>(bi)];
    const MaskSpec* m = masks.empty() ? nullptr : masks[static_cast<std::size_t>(bi)];
    Eigen::Index present = 0;
    for (Eigen::Index c = 0; c < b.values.cols(); ++c) {
      batch.presence[static_cast<std::size_t>(row)] = b.presence[static_cast<std::size_t>(c)];
      present += b.presence[static_cast<std::size_t>(c)] ? 1 : 0;
      batch.target.row(row) = b.values.col(c).transpose().template cast<T>();
      if (m) {
        for (Eigen::Index j = 0; j < g; ++j)
          batch.input(row, j) = m->keep(j, c) ? static_cast<T>(b.values(j, c)) : T(0);
      } else {
        batch.input.row(row) = batch.target.row(row);
      }
      ++row;
    }
    batch.block_start.push_back(row);
    if (total_blocks > 0)
      batch.block_coeff[static_cast<std::size_t>(bi)] =
          static_cast<T>(1.0 / (static_cast<double>(total_blocks) * static_cast<double>(g) *
                                static_cast<double>(present)));
  }
}

inline std::uint64_t train_mask_seed(std::uint64_t seed, Eigen::Index spot, long long iteration) {
  return derive_seed({seed, seed_tag::train_mask, static_cast<std::uint64_t>(spot),
                      static_cast<std::uint64_t>(iteration)});
}

inline std::uint64_t val_mask_seed(std::uint64_t seed, Eigen::Index spot) {
  return derive_seed({seed, seed_tag::val_mask, static_cast<std::uint64_t>(spot)});
}

}  // namespace detail

// Trains the reconstruction model: batches of train-split spots, fresh
// Bernoulli(rho) masks over originally-observed entries each iteration,
// full-matrix MSE loss, Adam updates. Every val_every iterations the
// masked-entry MSE on fixed-seed-masked validation centers is computed and
// the lowest-MSE parameter snapshot is kept. Deterministic for a given
// (dataset, config, seed) independent of the thread count: gradients are
// reduced over fixed 32-block chunks in chunk order.
template <typename T = float>
TrainResult<T> train(const Dataset& ds, const CompletionProvenance& prov,
                     const ModelConfig& model_config, const TrainConfig& cfg,
                     const std::function<void(const MetricsRow&)>& progress = {}) {
  cfg.validate();
  ModelConfig mc = model_config;
  if (mc.num_genes == 0) mc.num_genes = ds.num_genes();
  mc.validate();
  if (mc.num_genes != ds.num_genes())
    throw ValidationError("model num_genes does not match dataset");
  if (!ds.completed)
    throw ValidationError("train requires a median-completed dataset");

  std::vector<Eigen::Index> train_spots = ds.spots_in_split(Split::train);
  std::vector<Eigen::Index> val_spots = ds.spots_in_split(Split::val);
  if (train_spots.empty()) throw ValidationError("train split is empty");
  if (val_spots.empty()) throw ValidationError("val split is empty");

  BlockBuilder builder(ds, prov);
  const int threads = resolve_threads(cfg.threads);

  std::vector<ExpressionBlock> train_blocks(train_spots.size());
  parallel_for(static_cast<int>(train_spots.size()), threads, [&](int i, int) {
    train_blocks[static_cast<std::size_t>(i)] = builder.build(train_spots[static_cast<std::size_t>(i)]);
  });

  // Validation batches are fixed for the whole run: one mask per block from
  // a seed derived from the spot ordinal, applied once here.
  struct ValChunk {
    TokenBatch<T> batch;
    // (token row, gene) of each masked center entry plus its true value
    std::vector<std::tuple<Eigen::Index, Eigen::Index, double>> entries;
  };
  std::vector<ValChunk> val_chunks;
  {
    std::vector<ExpressionBlock> val_blocks(val_spots.size());
    parallel_for(static_cast<int>(val_spots.size()), threads, [&](int i, int) {
      val_blocks[static_cast<std::size_t>(i)] = builder.build(val_spots[static_cast<std::size_t>(i)]);
    });
    std::vector<MaskSpec> val_masks(val_spots.size());
    for (std::size_t i = 0; i < val_spots.size(); ++i) {
      SplitMix64 rng(detail::val_mask_seed(cfg.seed, val_spots[i]));
      val_masks[i] = sample_mask(val_blocks[i], cfg.rho, rng);
    }
    const std::size_t nchunks =
        (val_spots.size() + static_cast<std::size_t>(cfg.chunk_blocks) - 1) /
        static_cast<std::size_t>(cfg.chunk_blocks);
    val_chunks.resize(nchunks);
    long long maskable = 0;
    for (std::size_t ci = 0; ci < nchunks; ++ci) {
      std::size_t lo = ci * static_cast<std::size_t>(cfg.chunk_blocks);
      std::size_t hi = std::min(val_spots.size(), lo + static_cast<std::size_t>(cfg.chunk_blocks));
      std::vector<const ExpressionBlock*> bl;
      std::vector<const MaskSpec*> ms;
      for (std::size_t i = lo; i < hi; ++i) {
        bl.push_back(&val_blocks[i]);
        ms.push_back(&val_masks[i]);
      }
      detail::fill_token_batch(bl, ms, 0, val_chunks[ci].batch);
      Eigen::Index row = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        for (Eigen::Index j = 0; j < ds.num_genes(); ++j)
          if (!val_masks[i].keep(j, 0)) {
            val_chunks[ci].entries.emplace_back(row, j, val_blocks[i].values(j, 0));
            ++maskable;
          }
        row += val_blocks[i].values.cols();
      }
    }
    if (maskable == 0)
      throw ValidationError("no maskable entries in the validation split at rho=" +
                            format_double(cfg.rho));
  }

  Parameters<T> params = init_parameters<T>(mc, cfg.seed);
  Adam<T> adam(params.flat().size(), static_cast<T>(cfg.learning_rate),
               static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2), static_cast<T>(cfg.adam_eps));

  const int chunks_per_batch =
      (cfg.batch_size + cfg.chunk_blocks - 1) / cfg.chunk_blocks;
  struct Worker {
    TokenBatch<T> batch;
    EncoderActivations<T> acts;
  };
  // Scratch is per worker; results are keyed by chunk index so the
  // worker-to-chunk assignment cannot affect them.
  std::vector<Worker> worker_ws(static_cast<std::size_t>(threads));
  std::vector<Parameters<T>> chunk_grads(static_cast<std::size_t>(chunks_per_batch), Parameters<T>(mc));
  std::vector<T> chunk_loss(static_cast<std::size_t>(chunks_per_batch), T(0));

  auto validate_now = [&]() -> double {
    std::vector<double> sq(val_chunks.size(), 0.0);
    std::vector<long long> cnt(val_chunks.size(), 0);
    parallel_for(static_cast<int>(val_chunks.size()), threads, [&](int ci, int worker) {
      auto& w = worker_ws[static_cast<std::size_t>(worker)];
      encoder_forward(params, val_chunks[static_cast<std::size_t>(ci)].batch, w.acts);
      for (const auto& [row, gene, truth] : val_chunks[static_cast<std::size_t>(ci)].entries) {
        double d = static_cast<double>(w.acts.e_hat(row, gene)) - truth;
        sq[static_cast<std::size_t>(ci)] += d * d;
        ++cnt[static_cast<std::size_t>(ci)];
      }
    });
    double total = 0.0;
    long long n = 0;
    for (std::size_t i = 0; i < sq.size(); ++i) {
      total += sq[i];
      n += cnt[i];
    }
    return total / static_cast<double>(n);
  };

  struct BestState {
    Parameters<T> params;
    std::vector<T> m, v;
    long long adam_t = 0;
    long long iteration = 0;
    double val_mse = std::numeric_limits<double>::infinity();
  } best;

  TrainResult<T> result;
  auto record = [&](long long it, double train_mse, double val_mse) {
    MetricsRow row{it, train_mse, val_mse};
    result.metrics.push_back(row);
    if (progress) progress(row);
  };
  auto consider_best = [&](long long it, double val_mse) {
    if (std::isfinite(val_mse) && val_mse < best.val_mse) {
      best.params = params;
      best.m = adam.first_moment();
      best.v = adam.second_moment();
      best.adam_t = adam.iterations();
      best.iteration = it;
      best.val_mse = val_mse;
    }
  };

  {
    double v0 = validate_now();
    consider_best(0, v0);
    record(0, std::numeric_limits<double>::quiet_NaN(), v0);
  }

  // Epoch schedule: uniform without replacement, reshuffled per epoch.
  std::vector<std::size_t> order(train_blocks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t pos = order.size();
  long long epoch = 0;
  auto next_block = [&]() -> std::size_t {
    if (pos >= order.size()) {
      SplitMix64 rng(derive_seed({cfg.seed, seed_tag::shuffle, static_cast<std::uint64_t>(epoch)}));
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
      pos = 0;
      ++epoch;
    }
    return order[pos++];
  };

  std::vector<std::size_t> batch_members(static_cast<std::size_t>(cfg.batch_size));
  std::vector<MaskSpec> batch_masks(static_cast<std::size_t>(cfg.batch_size));

  for (long long it = 1; it <= cfg.max_iterations; ++it) {
    for (int i = 0; i < cfg.batch_size; ++i) {
      std::size_t bi = next_block();
      batch_members[static_cast<std::size_t>(i)] = bi;
      SplitMix64 rng(detail::train_mask_seed(cfg.seed, train_spots[bi], it));
      batch_masks[static_cast<std::size_t>(i)] = sample_mask(train_blocks[bi], cfg.rho, rng);
    }

    parallel_for(chunks_per_batch, threads, [&](int ci, int worker) {
      const int lo = ci * cfg.chunk_blocks;
      const int hi = std::min(cfg.batch_size, lo + cfg.chunk_blocks);
      std::vector<const ExpressionBlock*> bl;
      std::vector<const MaskSpec*> ms;
      for (int i = lo; i < hi; ++i) {
        bl.push_back(&train_blocks[batch_members[static_cast<std::size_t>(i)]]);
        ms.push_back(&batch_masks[static_cast<std::size_t>(i)]);
      }
      auto& w = worker_ws[static_cast<std::size_t>(worker)];
      detail::fill_token_batch(bl, ms, cfg.batch_size, w.batch);
      auto& grads = chunk_grads[static_cast<std::size_t>(ci)];
      grads.set_zero();
      encoder_forward(params, w.batch, w.acts);
      chunk_loss[static_cast<std::size_t>(ci)] = encoder_loss(w.batch, w.acts);
      encoder_backward(params, w.batch, w.acts, grads);
    });

    double train_mse = 0.0;
    for (int ci = 0; ci < chunks_per_batch; ++ci)
      train_mse += static_cast<double>(chunk_loss[static_cast<std::size_t>(ci)]);
    if (!std::isfinite(train_mse))
      throw NumericError("training diverged (non-finite loss) at iteration " + std::to_string(it));

    for (int ci = 1; ci < chunks_per_batch; ++ci)
      chunk_grads[0].add(chunk_grads[static_cast<std::size_t>(ci)]);
    adam.step(params.flat(), chunk_grads[0].flat());

    if (it % cfg.val_every == 0 || it == cfg.max_iterations) {
      double v = validate_now();
      consider_best(it, v);
      record(it, train_mse, v);
    }
  }

  auto to_checkpoint = [&](const Parameters<T>& p, const std::vector<T>& m, const std::vector<T>& v,
                           long long adam_t, long long it, double val) {
    Checkpoint<T> c;
    c.config = mc;
    c.params = p;
    c.adam_m = m;
    c.adam_v = v;
    c.adam_t = adam_t;
    c.iteration = it;
    c.best_val_mse = val;
    c.seed = cfg.seed;
    return c;
  };
  result.best = to_checkpoint(best.params, best.m, best.v, best.adam_t, best.iteration, best.val_mse);
  result.best_iteration = best.iteration;
  result.final = to_checkpoint(params, adam.first_moment(), adam.second_moment(),
                               adam.iterations(), cfg.max_iterations, best.val_mse);
  return result;
}

}  // namespace spackle
