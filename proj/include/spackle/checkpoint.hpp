#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spackle/errors.hpp"
#include "spackle/model.hpp"

namespace spackle {

// Model snapshot: parameters plus optimizer moments, iteration counter and
// selection metadata. Reloading reproduces bit-identical forward passes.
template <typename T>
struct Checkpoint {
  ModelConfig config;
  Parameters<T> params;
  std::vector<T> adam_m, adam_v;
  long long adam_t = 0;
  long long iteration = 0;
  double best_val_mse = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
const char* scalar_tag();
template <>
inline const char* scalar_tag<float>() {
  return "f32";
}
template <>
inline const char* scalar_tag<double>() {
  return "f64";
}

// Tensors are serialized in layout order, each traversed row-major.
template <typename T>
void write_tensors_row_major(std::ofstream& out, const Parameters<T>& p) {
  std::vector<T> buf;
  for (std::size_t i = 0; i < p.layout().entries.size(); ++i) {
    auto t = p.tensor(i);
    buf.resize(static_cast<std::size_t>(t.size()));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) buf[k++] = t(r, c);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(T)));
  }
}

template <typename T>
void read_tensors_row_major(std::ifstream& in, Parameters<T>& p) {
  std::vector<T> buf;
  for (std::size_t i = 0; i < p.layout().entries.size(); ++i) {
    auto t = p.tensor(i);
    buf.resize(static_cast<std::size_t>(t.size()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(T)));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = buf[k++];
  }
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'K', 'L', 'C', 'K', 'P', '1'};

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format is little-endian");
  if (!ckpt.params.all_finite())
    throw ValidationError("refusing to save checkpoint with non-finite parameters");

  nlohmann::json j;
  j["scalar"] = detail::scalar_tag<T>();
  j["config"] = {{"d_k", ckpt.config.d_k},
                 {"num_layers", ckpt.config.num_layers},
                 {"num_heads", ckpt.config.num_heads},
                 {"ffn_dim", ckpt.config.ffn_dim},
                 {"num_genes", ckpt.config.num_genes},
                 {"ring_embedding", ckpt.config.ring_embedding}};
  j["iteration"] = ckpt.iteration;
  j["best_val_mse"] = ckpt.best_val_mse;
  j["seed"] = ckpt.seed;
  j["adam_t"] = ckpt.adam_t;
  j["tensors"] = nlohmann::json::array();
  for (const auto& e : ckpt.params.layout().entries)
    j["tensors"].push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}});
  const std::string header = j.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_tensors_row_major(out, ckpt.params);
  auto write_vec = [&](const std::vector<T>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
  };
  write_vec(ckpt.adam_m);
  write_vec(ckpt.adam_v);
  if (!out) throw IoError("write failure on " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format is little-endian");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw ValidationError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("truncated checkpoint header: " + path.string());

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (j.at("scalar").get<std::string>() != detail::scalar_tag<T>())
    throw ValidationError("checkpoint scalar type is " + j.at("scalar").get<std::string>() +
                          ", expected " + detail::scalar_tag<T>());

  Checkpoint<T> ckpt;
  const auto& jc = j.at("config");
  ckpt.config.d_k = jc.at("d_k").get<int>();
  ckpt.config.num_layers = jc.at("num_layers").get<int>();
  ckpt.config.num_heads = jc.at("num_heads").get<int>();
  ckpt.config.ffn_dim = jc.at("ffn_dim").get<int>();
  ckpt.config.num_genes = jc.at("num_genes").get<Eigen::Index>();
  ckpt.config.ring_embedding = jc.value("ring_embedding", false);
  ckpt.config.validate();
  ckpt.iteration = j.at("iteration").get<long long>();
  ckpt.best_val_mse = j.at("best_val_mse").get<double>();
  ckpt.seed = j.at("seed").get<std::uint64_t>();
  ckpt.adam_t = j.at("adam_t").get<long long>();

  ckpt.params = Parameters<T>(ckpt.config);
  const auto& entries = ckpt.params.layout().entries;
  const auto& jt = j.at("tensors");
  if (jt.size() != entries.size())
    throw ValidationError("checkpoint tensor list does not match model layout");
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (jt[i].at("name").get<std::string>() != entries[i].name ||
        jt[i].at("rows").get<Eigen::Index>() != entries[i].rows ||
        jt[i].at("cols").get<Eigen::Index>() != entries[i].cols)
      throw ValidationError("checkpoint tensor " + entries[i].name +
                            " does not match the model layout (different g or d_k?)");

  detail::read_tensors_row_major(in, ckpt.params);
  const std::size_t n = ckpt.params.flat().size();
  ckpt.adam_m.resize(n);
  ckpt.adam_v.resize(n);
  in.read(reinterpret_cast<char*>(ckpt.adam_m.data()), static_cast<std::streamsize>(n * sizeof(T)));
  in.read(reinterpret_cast<char*>(ckpt.adam_v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw ValidationError("truncated checkpoint data: " + path.string());
  if (!ckpt.params.all_finite())
    throw ValidationError("checkpoint contains non-finite parameters: " + path.string());
  return ckpt;
}

}  // namespace spackle
