#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "spackle/block.hpp"
#include "spackle/errors.hpp"
#include "spackle/masking.hpp"
#include "spackle/rng.hpp"

namespace spackle {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int d_k = 128;      // token/model dimension
  int num_layers = 2;
  int num_heads = 4;  // must divide d_k
  int ffn_dim = 512;  // 4 * d_k
  Eigen::Index num_genes = 0;
  // Learned embedding per hop ring (center / ring 1 / ring 2), added after
  // l_in. Off by default: without it the encoder is permutation-equivariant
  // over neighbor tokens.
  bool ring_embedding = false;
  // Parameter-free token standardization between the last encoder layer and
  // l_out. Keeps the output adapter's input at unit scale regardless of the
  // residual-stream magnitude.
  bool final_norm = true;

  int head_dim() const { return d_k / num_heads; }

  void validate() const {
    if (d_k < 1 || num_layers < 1 || num_heads < 1 || ffn_dim < 1)
      throw ValidationError("model dimensions must be >= 1");
    if (d_k % num_heads != 0) throw ValidationError("num_heads must divide d_k");
    if (num_genes < 1) throw ValidationError("model num_genes must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Flat parameter storage with a named-tensor layout. Weight matrices are
// [out x in] (y = W x + b); the layout order is the serialization order.
struct ParameterLayout {
  struct Entry {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    std::size_t offset = 0;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;

  // per-layer tensor slots, in layout order
  enum LayerSlot {
    kLn1Gain = 0, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2, kSlotsPerLayer
  };

  static ParameterLayout make(const ModelConfig& cfg) {
    cfg.validate();
    ParameterLayout lay;
    auto add = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
      lay.entries.push_back({name, rows, cols, lay.total});
      lay.total += static_cast<std::size_t>(rows * cols);
    };
    add("l_in.weight", cfg.d_k, cfg.num_genes);
    add("l_in.bias", cfg.d_k, 1);
    if (cfg.ring_embedding) add("ring_embedding", cfg.d_k, 3);
    lay.has_ring = cfg.ring_embedding;
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      add(p + "ln1.gain", cfg.d_k, 1);
      add(p + "ln1.bias", cfg.d_k, 1);
      add(p + "attn.wq", cfg.d_k, cfg.d_k);
      add(p + "attn.bq", cfg.d_k, 1);
      add(p + "attn.wk", cfg.d_k, cfg.d_k);
      add(p + "attn.bk", cfg.d_k, 1);
      add(p + "attn.wv", cfg.d_k, cfg.d_k);
      add(p + "attn.bv", cfg.d_k, 1);
      add(p + "attn.wo", cfg.d_k, cfg.d_k);
      add(p + "attn.bo", cfg.d_k, 1);
      add(p + "ln2.gain", cfg.d_k, 1);
      add(p + "ln2.bias", cfg.d_k, 1);
      add(p + "ffn.w1", cfg.ffn_dim, cfg.d_k);
      add(p + "ffn.b1", cfg.ffn_dim, 1);
      add(p + "ffn.w2", cfg.d_k, cfg.ffn_dim);
      add(p + "ffn.b2", cfg.d_k, 1);
    }
    add("l_out.weight", cfg.num_genes, cfg.d_k);
    add("l_out.bias", cfg.num_genes, 1);
    return lay;
  }

  bool has_ring = false;

  std::size_t layer_base(int layer) const {
    return (has_ring ? 3 : 2) + static_cast<std::size_t>(layer) * kSlotsPerLayer;
  }
  std::size_t l_in_w() const { return 0; }
  std::size_t l_in_b() const { return 1; }
  std::size_t ring() const { return 2; }  // valid only when has_ring
  std::size_t l_out_w() const { return entries.size() - 2; }
  std::size_t l_out_b() const { return entries.size() - 1; }
};

template <typename T>
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(const ModelConfig& cfg)
      : config_(cfg), layout_(ParameterLayout::make(cfg)), data_(layout_.total, T(0)) {}

  const ModelConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return layout_; }
  std::vector<T>& flat() { return data_; }
  const std::vector<T>& flat() const { return data_; }

  Eigen::Map<MatX<T>> tensor(std::size_t i) {
    const auto& e = layout_.entries[i];
    return {data_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const MatX<T>> tensor(std::size_t i) const {
    const auto& e = layout_.entries[i];
    return {data_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<VecX<T>> vec(std::size_t i) {
    const auto& e = layout_.entries[i];
    return {data_.data() + e.offset, e.rows};
  }
  Eigen::Map<const VecX<T>> vec(std::size_t i) const {
    const auto& e = layout_.entries[i];
    return {data_.data() + e.offset, e.rows};
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), T(0)); }

  void add(const Parameters& other) {
    Eigen::Map<VecX<T>> a(data_.data(), static_cast<Eigen::Index>(data_.size()));
    Eigen::Map<const VecX<T>> b(other.data_.data(), static_cast<Eigen::Index>(other.data_.size()));
    a += b;
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  ModelConfig config_;
  ParameterLayout layout_;
  std::vector<T> data_;
};

// Scaled uniform fan-in initialization: weights ~ U(-1/sqrt(fan_in),
// +1/sqrt(fan_in)), biases zero, layer-norm gains one. Elements are drawn
// in layout order, column-major within each tensor.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters<T> p(cfg);
  SplitMix64 rng(derive_seed({seed, seed_tag::init}));
  auto& flat = p.flat();
  for (const auto& e : p.layout().entries) {
    if (e.name == "ring_embedding") {
      continue;  // starts at zero: flag-on is initially identical to flag-off
    } else if (e.cols > 1) {
      double limit = 1.0 / std::sqrt(static_cast<double>(e.cols));
      for (Eigen::Index i = 0; i < e.rows * e.cols; ++i)
        flat[e.offset + static_cast<std::size_t>(i)] = static_cast<T>(rng.uniform(-limit, limit));
    } else if (e.name.find("gain") != std::string::npos) {
      for (Eigen::Index i = 0; i < e.rows; ++i) flat[e.offset + static_cast<std::size_t>(i)] = T(1);
    }
    // biases stay zero
  }
  return p;
}

// A batch of expression blocks flattened to one token matrix, tokens as
// rows in block-major order. `block_start` has one extra trailing entry so
// block b spans rows [block_start[b], block_start[b+1]).
template <typename T>
struct TokenBatch {
  MatX<T> input;   // [tokens x g]
  MatX<T> target;  // [tokens x g]; may be empty for inference
  std::vector<std::uint8_t> presence;
  std::vector<Eigen::Index> block_start;
  std::vector<T> block_coeff;  // per-block dLoss/dSqErr coefficient

  Eigen::Index tokens() const { return input.rows(); }
  Eigen::Index blocks() const { return static_cast<Eigen::Index>(block_start.size()) - 1; }
};

template <typename T>
struct LayerActivations {
  MatX<T> xhat1, y1;
  VecX<T> inv_std1;
  MatX<T> q, k, v;
  std::vector<MatX<T>> attn;  // softmax matrices, [block * num_heads]
  MatX<T> attn_cat;
  MatX<T> x_attn;  // residual stream after attention
  MatX<T> xhat2, y2;
  VecX<T> inv_std2;
  MatX<T> z1, tanh_u, h;  // FFN pre-activation, cached tanh, activation
  MatX<T> x_out;
};

template <typename T>
struct EncoderActivations {
  MatX<T> x0;
  std::vector<LayerActivations<T>> layers;
  MatX<T> xhat_final;  // standardized last-layer output (when final_norm)
  VecX<T> inv_std_final;
  MatX<T> e_hat;  // [tokens x g]
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;
// tanh-based GELU constants
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename T>
void layer_norm_forward(const MatX<T>& x, Eigen::Map<const VecX<T>> gain,
                        Eigen::Map<const VecX<T>> bias, MatX<T>& xhat, VecX<T>& inv_std,
                        MatX<T>& y) {
  const Eigen::Index d = x.cols();
  VecX<T> mu = x.rowwise().mean();
  xhat = x.colwise() - mu;
  inv_std = ((xhat.array().square().rowwise().sum() / static_cast<T>(d)) + static_cast<T>(kLayerNormEps))
                .rsqrt()
                .matrix();
  xhat.array().colwise() *= inv_std.array();
  y = xhat;
  y.array().rowwise() *= gain.transpose().array();
  y.array().rowwise() += bias.transpose().array();
}

// dx for y = gain*xhat + bias given dy; accumulates dgain/dbias.
template <typename T>
void layer_norm_backward(const MatX<T>& dy, const MatX<T>& xhat, const VecX<T>& inv_std,
                         Eigen::Map<const VecX<T>> gain, MatX<T>& dx,
                         Eigen::Map<VecX<T>> dgain, Eigen::Map<VecX<T>> dbias) {
  dgain += dy.cwiseProduct(xhat).colwise().sum().transpose();
  dbias += dy.colwise().sum().transpose();
  MatX<T> dxhat = dy;
  dxhat.array().rowwise() *= gain.transpose().array();
  VecX<T> m1 = dxhat.rowwise().mean();
  VecX<T> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
  dx = dxhat;
  dx.colwise() -= m1;
  dx -= (xhat.array().colwise() * m2.array()).matrix();
  dx.array().colwise() *= inv_std.array();
}

// In-place row softmax with absent key columns excluded. Absent columns
// get weight exactly zero; every block carries at least one present token.
template <typename T>
void masked_softmax_rows(MatX<T>& scores, std::span<const std::uint8_t> presence) {
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (Eigen::Index j = 0; j < scores.cols(); ++j)
    if (!presence[static_cast<std::size_t>(j)]) scores.col(j).setConstant(neg_inf);
  VecX<T> rowmax = scores.rowwise().maxCoeff();
  scores = ((scores.colwise() - rowmax).array().exp()).matrix();
  VecX<T> rowsum = scores.rowwise().sum();
  scores.array().colwise() /= rowsum.array();
}

template <typename T>
void gelu_forward(const MatX<T>& z, MatX<T>& tanh_u, MatX<T>& h) {
  tanh_u = (static_cast<T>(kGeluC) * (z.array() + static_cast<T>(kGeluA) * z.array().cube()))
               .tanh()
               .matrix();
  h = (static_cast<T>(0.5) * z.array() * (static_cast<T>(1) + tanh_u.array())).matrix();
}

template <typename T>
MatX<T> gelu_backward(const MatX<T>& dh, const MatX<T>& z, const MatX<T>& tanh_u) {
  auto zz = z.array();
  auto t = tanh_u.array();
  auto du = static_cast<T>(kGeluC) * (static_cast<T>(1) + static_cast<T>(3 * kGeluA) * zz.square());
  auto dgelu = static_cast<T>(0.5) * (static_cast<T>(1) + t) +
               static_cast<T>(0.5) * zz * (static_cast<T>(1) - t.square()) * du;
  return (dh.array() * dgelu).matrix();
}

template <typename T>
void check_finite_or_throw(const MatX<T>& m, int layer, const char* what) {
  if (!m.allFinite())
    throw NumericError(std::string("non-finite ") + what + " at layer " + std::to_string(layer));
}

}  // namespace detail

// Forward pass through l_in, num_layers pre-norm encoder layers and l_out.
// Results and all intermediates land in `acts`.
template <typename T>
void encoder_forward(const Parameters<T>& p, const TokenBatch<T>& batch,
                     EncoderActivations<T>& acts, bool check_finite = false) {
  const ModelConfig& cfg = p.config();
  const ParameterLayout& lay = p.layout();
  const Eigen::Index tok = batch.tokens();
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  acts.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  acts.x0.noalias() = batch.input * p.tensor(lay.l_in_w()).transpose();
  acts.x0.array().rowwise() += p.vec(lay.l_in_b()).transpose().array();
  if (cfg.ring_embedding) {
    auto emb = p.tensor(lay.ring());
    for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
      const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
      const Eigen::Index t = batch.block_start[static_cast<std::size_t>(b) + 1] - start;
      for (Eigen::Index c = 0; c < t; ++c)
        acts.x0.row(start + c) += emb.col(c == 0 ? 0 : (c <= 6 ? 1 : 2)).transpose();
    }
  }

  const MatX<T>* x_in = &acts.x0;
  for (int l = 0; l < cfg.num_layers; ++l) {
    auto& a = acts.layers[static_cast<std::size_t>(l)];
    const std::size_t base = lay.layer_base(l);
    using S = ParameterLayout;

    detail::layer_norm_forward(*x_in, p.vec(base + S::kLn1Gain), p.vec(base + S::kLn1Bias),
                               a.xhat1, a.inv_std1, a.y1);
    a.q.noalias() = a.y1 * p.tensor(base + S::kWq).transpose();
    a.q.array().rowwise() += p.vec(base + S::kBq).transpose().array();
    a.k.noalias() = a.y1 * p.tensor(base + S::kWk).transpose();
    a.k.array().rowwise() += p.vec(base + S::kBk).transpose().array();
    a.v.noalias() = a.y1 * p.tensor(base + S::kWv).transpose();
    a.v.array().rowwise() += p.vec(base + S::kBv).transpose().array();

    a.attn.resize(static_cast<std::size_t>(batch.blocks()) * static_cast<std::size_t>(heads));
    a.attn_cat.resize(tok, cfg.d_k);
    for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
      const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
      const Eigen::Index t = batch.block_start[static_cast<std::size_t>(b) + 1] - start;
      std::span<const std::uint8_t> pres(batch.presence.data() + start, static_cast<std::size_t>(t));
      for (int h = 0; h < heads; ++h) {
        MatX<T>& w = a.attn[static_cast<std::size_t>(b) * heads + static_cast<std::size_t>(h)];
        w.noalias() = a.q.block(start, h * dh, t, dh) * a.k.block(start, h * dh, t, dh).transpose();
        w *= scale;
        detail::masked_softmax_rows(w, pres);
        a.attn_cat.block(start, h * dh, t, dh).noalias() = w * a.v.block(start, h * dh, t, dh);
      }
    }

    a.x_attn.noalias() = a.attn_cat * p.tensor(base + S::kWo).transpose();
    a.x_attn.array().rowwise() += p.vec(base + S::kBo).transpose().array();
    a.x_attn += *x_in;

    detail::layer_norm_forward(a.x_attn, p.vec(base + S::kLn2Gain), p.vec(base + S::kLn2Bias),
                               a.xhat2, a.inv_std2, a.y2);
    a.z1.noalias() = a.y2 * p.tensor(base + S::kW1).transpose();
    a.z1.array().rowwise() += p.vec(base + S::kB1).transpose().array();
    detail::gelu_forward(a.z1, a.tanh_u, a.h);
    a.x_out.noalias() = a.h * p.tensor(base + S::kW2).transpose();
    a.x_out.array().rowwise() += p.vec(base + S::kB2).transpose().array();
    a.x_out += a.x_attn;

    if (check_finite) detail::check_finite_or_throw(a.x_out, l, "activation");
    x_in = &a.x_out;
  }

  const MatX<T>* head_in = x_in;
  if (cfg.final_norm) {
    VecX<T> mu = x_in->rowwise().mean();
    acts.xhat_final = x_in->colwise() - mu;
    acts.inv_std_final = ((acts.xhat_final.array().square().rowwise().sum() /
                           static_cast<T>(cfg.d_k)) +
                          static_cast<T>(detail::kLayerNormEps))
                             .rsqrt()
                             .matrix();
    acts.xhat_final.array().colwise() *= acts.inv_std_final.array();
    head_in = &acts.xhat_final;
  }
  acts.e_hat.noalias() = *head_in * p.tensor(lay.l_out_w()).transpose();
  acts.e_hat.array().rowwise() += p.vec(lay.l_out_b()).transpose().array();
  if (check_finite) detail::check_finite_or_throw(acts.e_hat, cfg.num_layers, "output");
}

// Loss over a forward-passed batch: sum over blocks of block_coeff *
// squared error on present token rows.
template <typename T>
T encoder_loss(const TokenBatch<T>& batch, const EncoderActivations<T>& acts) {
  T total = 0;
  for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
    const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
    const Eigen::Index end = batch.block_start[static_cast<std::size_t>(b) + 1];
    T sq = 0;
    for (Eigen::Index i = start; i < end; ++i) {
      if (!batch.presence[static_cast<std::size_t>(i)]) continue;
      sq += (acts.e_hat.row(i) - batch.target.row(i)).squaredNorm();
    }
    total += batch.block_coeff[static_cast<std::size_t>(b)] * sq;
  }
  return total;
}

// Backpropagation through the whole encoder; parameter gradients are
// accumulated (+=) into `grads`, which must share the model config.
template <typename T>
void encoder_backward(const Parameters<T>& p, const TokenBatch<T>& batch,
                      const EncoderActivations<T>& acts, Parameters<T>& grads) {
  const ModelConfig& cfg = p.config();
  const ParameterLayout& lay = p.layout();
  const Eigen::Index tok = batch.tokens();
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  using S = ParameterLayout;

  MatX<T> d_e(tok, cfg.num_genes);
  d_e.setZero();
  for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
    const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
    const Eigen::Index end = batch.block_start[static_cast<std::size_t>(b) + 1];
    const T c = static_cast<T>(2) * batch.block_coeff[static_cast<std::size_t>(b)];
    for (Eigen::Index i = start; i < end; ++i)
      if (batch.presence[static_cast<std::size_t>(i)])
        d_e.row(i) = c * (acts.e_hat.row(i) - batch.target.row(i));
  }

  const MatX<T>& x_last =
      cfg.num_layers > 0 ? acts.layers[static_cast<std::size_t>(cfg.num_layers - 1)].x_out : acts.x0;
  const MatX<T>& head_in = cfg.final_norm ? acts.xhat_final : x_last;
  grads.tensor(lay.l_out_w()).noalias() += d_e.transpose() * head_in;
  grads.vec(lay.l_out_b()) += d_e.colwise().sum().transpose();
  MatX<T> dx = d_e * p.tensor(lay.l_out_w());
  if (cfg.final_norm) {
    // backward through the parameter-free standardization
    VecX<T> m1 = dx.rowwise().mean();
    VecX<T> m2 = dx.cwiseProduct(acts.xhat_final).rowwise().mean();
    dx.colwise() -= m1;
    dx -= (acts.xhat_final.array().colwise() * m2.array()).matrix();
    dx.array().colwise() *= acts.inv_std_final.array();
  }

  MatX<T> dq(tok, cfg.d_k), dk(tok, cfg.d_k), dv(tok, cfg.d_k);
  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& a = acts.layers[static_cast<std::size_t>(l)];
    const MatX<T>& x_in = l == 0 ? acts.x0 : acts.layers[static_cast<std::size_t>(l - 1)].x_out;
    const std::size_t base = lay.layer_base(l);

    // FFN branch: x_out = x_attn + W2 gelu(W1 LN2(x_attn) + b1) + b2
    MatX<T> dh_act = dx * p.tensor(base + S::kW2);
    grads.tensor(base + S::kW2).noalias() += dx.transpose() * a.h;
    grads.vec(base + S::kB2) += dx.colwise().sum().transpose();
    MatX<T> dz1 = detail::gelu_backward(dh_act, a.z1, a.tanh_u);
    MatX<T> dy2 = dz1 * p.tensor(base + S::kW1);
    grads.tensor(base + S::kW1).noalias() += dz1.transpose() * a.y2;
    grads.vec(base + S::kB1) += dz1.colwise().sum().transpose();
    MatX<T> dx_ln2;
    detail::layer_norm_backward(dy2, a.xhat2, a.inv_std2, p.vec(base + S::kLn2Gain), dx_ln2,
                                grads.vec(base + S::kLn2Gain), grads.vec(base + S::kLn2Bias));
    MatX<T> dx_attn = dx + dx_ln2;

    // attention branch: x_attn = x_in + Wo concat_h(softmax(QK^T) V) + bo
    MatX<T> da = dx_attn * p.tensor(base + S::kWo);
    grads.tensor(base + S::kWo).noalias() += dx_attn.transpose() * a.attn_cat;
    grads.vec(base + S::kBo) += dx_attn.colwise().sum().transpose();

    dq.setZero();
    dk.setZero();
    dv.setZero();
    for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
      const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
      const Eigen::Index t = batch.block_start[static_cast<std::size_t>(b) + 1] - start;
      for (int h = 0; h < heads; ++h) {
        const MatX<T>& w = a.attn[static_cast<std::size_t>(b) * heads + static_cast<std::size_t>(h)];
        auto da_bh = da.block(start, h * dh, t, dh);
        auto q_bh = a.q.block(start, h * dh, t, dh);
        auto k_bh = a.k.block(start, h * dh, t, dh);
        auto v_bh = a.v.block(start, h * dh, t, dh);
        MatX<T> ds_soft = da_bh * v_bh.transpose();
        dv.block(start, h * dh, t, dh).noalias() += w.transpose() * da_bh;
        MatX<T> tmp = w.cwiseProduct(ds_soft);
        VecX<T> rowsum = tmp.rowwise().sum();
        MatX<T> ds = tmp - (w.array().colwise() * rowsum.array()).matrix();
        dq.block(start, h * dh, t, dh).noalias() += scale * (ds * k_bh);
        dk.block(start, h * dh, t, dh).noalias() += scale * (ds.transpose() * q_bh);
      }
    }

    MatX<T> dy1 = dq * p.tensor(base + S::kWq);
    dy1.noalias() += dk * p.tensor(base + S::kWk);
    dy1.noalias() += dv * p.tensor(base + S::kWv);
    grads.tensor(base + S::kWq).noalias() += dq.transpose() * a.y1;
    grads.vec(base + S::kBq) += dq.colwise().sum().transpose();
    grads.tensor(base + S::kWk).noalias() += dk.transpose() * a.y1;
    grads.vec(base + S::kBk) += dk.colwise().sum().transpose();
    grads.tensor(base + S::kWv).noalias() += dv.transpose() * a.y1;
    grads.vec(base + S::kBv) += dv.colwise().sum().transpose();

    MatX<T> dx_ln1;
    detail::layer_norm_backward(dy1, a.xhat1, a.inv_std1, p.vec(base + S::kLn1Gain), dx_ln1,
                                grads.vec(base + S::kLn1Gain), grads.vec(base + S::kLn1Bias));
    dx = dx_attn + dx_ln1;
  }

  grads.tensor(lay.l_in_w()).noalias() += dx.transpose() * batch.input;
  grads.vec(lay.l_in_b()) += dx.colwise().sum().transpose();
  if (cfg.ring_embedding) {
    auto demb = grads.tensor(lay.ring());
    for (Eigen::Index b = 0; b < batch.blocks(); ++b) {
      const Eigen::Index start = batch.block_start[static_cast<std::size_t>(b)];
      const Eigen::Index t = batch.block_start[static_cast<std::size_t>(b) + 1] - start;
      for (Eigen::Index c = 0; c < t; ++c)
        demb.col(c == 0 ? 0 : (c <= 6 ? 1 : 2)) += dx.row(start + c).transpose();
    }
  }
}

// Single-head scaled dot-product attention with key masking: rows of q, k,
// v are tokens; absent tokens receive attention weight exactly zero.
template <typename T>
MatX<T> attention(const MatX<T>& q, const MatX<T>& k, const MatX<T>& v,
                  std::span<const std::uint8_t> presence) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() || q.cols() != v.cols())
    throw ValidationError("attention inputs must share shape [t x d_h]");
  if (static_cast<Eigen::Index>(presence.size()) != q.rows())
    throw ValidationError("presence length must equal token count");
  bool any = false;
  for (auto f : presence) any = any || f;
  if (!any) throw ValidationError("attention requires at least one present token");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.cols())));
  MatX<T> s = q * k.transpose() * scale;
  detail::masked_softmax_rows(s, presence);
  return s * v;
}

namespace detail {

template <typename T>
TokenBatch<T> single_block_batch(const Eigen::MatrixXd& e_m,
                                 std::span<const std::uint8_t> presence) {
  TokenBatch<T> batch;
  batch.input = e_m.transpose().cast<T>();
  batch.presence.assign(presence.begin(), presence.end());
  if (batch.presence.empty() || !batch.presence[0])
    throw ValidationError("block center (column 0) must be present");
  batch.block_start = {0, static_cast<Eigen::Index>(batch.presence.size())};
  batch.block_coeff = {T(0)};
  return batch;
}

}  // namespace detail

// Full reconstruction of one block: tokens are the g-vector columns of
// e_m, passed through l_in, the encoder stack and l_out. Throws
// NumericError naming the layer if an intermediate goes non-finite.
template <typename T>
MatX<T> forward(const Parameters<T>& p, const Eigen::MatrixXd& e_m,
                std::span<const std::uint8_t> presence) {
  if (e_m.rows() != p.config().num_genes)
    throw ValidationError("e_m gene dimension does not match model");
  if (static_cast<Eigen::Index>(presence.size()) != e_m.cols())
    throw ValidationError("presence length must match e_m columns");
  TokenBatch<T> batch = detail::single_block_batch<T>(e_m, presence);
  EncoderActivations<T> acts;
  encoder_forward(p, batch, acts, /*check_finite=*/true);
  return acts.e_hat.transpose();
}

// Mean squared entrywise difference over the present (non-padded) columns.
inline double loss(const Eigen::MatrixXd& e_x, const Eigen::MatrixXd& e_hat,
                   std::span<const std::uint8_t> presence) {
  if (e_x.rows() != e_hat.rows() || e_x.cols() != e_hat.cols())
    throw ValidationError("loss requires equal shapes");
  if (static_cast<Eigen::Index>(presence.size()) != e_x.cols())
    throw ValidationError("presence length must match columns");
  double sq = 0.0;
  Eigen::Index present = 0;
  for (Eigen::Index c = 0; c < e_x.cols(); ++c) {
    if (!presence[static_cast<std::size_t>(c)]) continue;
    ++present;
    sq += (e_x.col(c) - e_hat.col(c)).squaredNorm();
  }
  if (present == 0) throw ValidationError("loss over zero present columns");
  return sq / (static_cast<double>(present) * static_cast<double>(e_x.rows()));
}

inline double loss(const Eigen::MatrixXd& e_x, const Eigen::MatrixXd& e_hat) {
  std::vector<std::uint8_t> presence(static_cast<std::size_t>(e_x.cols()), 1);
  return loss(e_x, e_hat, presence);
}

template <typename T>
struct LossAndGradients {
  T loss = 0;
  Parameters<T> grads;
};

// Loss and exact analytic gradients for one block.
template <typename T>
LossAndGradients<T> gradients(const Parameters<T>& p, const Eigen::MatrixXd& e_x,
                              const Eigen::MatrixXd& e_m, std::span<const std::uint8_t> presence) {
  if (e_x.rows() != e_m.rows() || e_x.cols() != e_m.cols())
    throw ValidationError("e_x and e_m must share shape");
  TokenBatch<T> batch = detail::single_block_batch<T>(e_m, presence);
  batch.target = e_x.transpose().cast<T>();
  Eigen::Index present = 0;
  for (auto f : batch.presence) present += f ? 1 : 0;
  batch.block_coeff[0] = static_cast<T>(1.0 / (static_cast<double>(present) * static_cast<double>(e_x.rows())));

  LossAndGradients<T> out;
  out.grads = Parameters<T>(p.config());
  EncoderActivations<T> acts;
  encoder_forward(p, batch, acts, /*check_finite=*/true);
  out.loss = encoder_loss(batch, acts);
  if (!std::isfinite(static_cast<double>(out.loss))) throw NumericError("non-finite loss");
  encoder_backward(p, batch, acts, out.grads);
  if (!out.grads.all_finite()) throw NumericError("non-finite gradient");
  return out;
}

// Piecewise completion of the center column: keep x_i where the mask keeps
// the entry (bit-exact copy), use the reconstruction where it masks it.
template <typename T>
Eigen::VectorXd complete_spot(const ExpressionBlock& block, const MaskSpec& mask,
                              const Parameters<T>& params) {
  if (block.values.rows() != params.config().num_genes)
    throw ValidationError("block gene dimension does not match model");
  if (mask.keep.rows() != block.values.rows() || mask.keep.cols() != block.values.cols())
    throw ValidationError("mask shape does not match block");
  Eigen::MatrixXd e_m = apply_mask(block, mask);
  std::span<const std::uint8_t> presence(block.presence.data(), block.presence.size());
  MatX<T> e_hat = forward(params, e_m, presence);
  Eigen::VectorXd out(block.values.rows());
  for (Eigen::Index j = 0; j < block.values.rows(); ++j)
    out(j) = mask.keep(j, 0) ? block.values(j, 0) : static_cast<double>(e_hat(j, 0));
  return out;
}

}  // namespace spackle
