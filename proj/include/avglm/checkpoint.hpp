#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "avglm/model.hpp"

namespace avglm {

// Self-describing checkpoint container: a line-oriented text header with the
// model config and run metadata, then one shape-tagged raw little-endian
// array per parameter tensor. Round trips are byte-exact.

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::optional<double> valid_ppl;
  std::uint64_t vocab_hash = 0;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename S>
const char* dtype_tag() {
  return sizeof(S) == 4 ? "f32" : "f64";
}

inline void require_little_endian() {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
                "mixed-endian platforms unsupported");
  if constexpr (std::endian::native != std::endian::little)
    throw IoError("checkpoint format requires a little-endian platform");
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const ModelParams<S>& params,
                     const CheckpointMeta& meta) {
  detail::require_little_endian();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);

  const auto named = params.parameters();
  const ModelConfig& c = params.config;
  f << "AVGLM-CKPT v1\n";
  f << "vocab_size " << c.vocab_size << "\n";
  f << "dim " << c.dim << "\n";
  f << "layers " << c.layers << "\n";
  f << "dropout_rate " << detail::format_g17(c.dropout_rate) << "\n";
  f << "sequence_length " << c.sequence_length << "\n";
  f << "use_memory " << (c.use_memory ? 1 : 0) << "\n";
  f << "seed " << meta.seed << "\n";
  f << "epoch " << meta.epoch << "\n";
  f << "valid_ppl " << (meta.valid_ppl ? detail::format_g17(*meta.valid_ppl) : "none") << "\n";
  char hash_buf[20];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(meta.vocab_hash));
  f << "vocab_hash " << hash_buf << "\n";
  f << "tensor_count " << named.size() << "\n";
  f << "END-HEADER\n";

  for (const auto& nt : named) {
    f << nt.name << " " << detail::dtype_tag<S>() << " " << nt.tensor.rank();
    for (auto d : nt.tensor.shape()) f << " " << d;
    f << "\n";
    f.write(reinterpret_cast<const char*>(nt.tensor.data().data()),
            static_cast<std::streamsize>(nt.tensor.size() * sizeof(S)));
  }
  if (!f) throw IoError("write failed: " + path);
}

template <typename S>
struct LoadedCheckpoint {
  ModelParams<S> params;
  CheckpointMeta meta;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  detail::require_little_endian();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);

  auto fail = [&](const std::string& why) -> DataError {
    const auto off = static_cast<long long>(f.tellg());
    return DataError("corrupt checkpoint " + path + " at byte offset " + std::to_string(off) +
                     ": " + why);
  };

  std::string line;
  if (!std::getline(f, line) || line != "AVGLM-CKPT v1") throw fail("bad magic/version line");

  ModelConfig cfg;
  CheckpointMeta meta;
  std::size_t tensor_count = 0;
  while (std::getline(f, line)) {
    if (line == "END-HEADER") break;
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key >> value)) throw fail("malformed header line '" + line + "'");
    if (key == "vocab_size")
      cfg.vocab_size = std::stoull(value);
    else if (key == "dim")
      cfg.dim = std::stoull(value);
    else if (key == "layers")
      cfg.layers = std::stoull(value);
    else if (key == "dropout_rate")
      cfg.dropout_rate = std::stod(value);
    else if (key == "sequence_length")
      cfg.sequence_length = std::stoull(value);
    else if (key == "use_memory")
      cfg.use_memory = value != "0";
    else if (key == "seed")
      meta.seed = std::stoull(value);
    else if (key == "epoch")
      meta.epoch = std::stoull(value);
    else if (key == "valid_ppl")
      meta.valid_ppl = value == "none" ? std::nullopt : std::optional<double>(std::stod(value));
    else if (key == "vocab_hash")
      meta.vocab_hash = std::stoull(value, nullptr, 16);
    else if (key == "tensor_count")
      tensor_count = std::stoull(value);
    else
      throw fail("unknown header key '" + key + "'");
  }
  if (line != "END-HEADER") throw fail("missing END-HEADER");
  cfg.validate();

  // Materialize the expected parameter set, then fill storage in file order.
  Rng dummy(0);
  ModelParams<S> params = ModelParams<S>::init(cfg, dummy);
  auto named = params.parameters();
  if (tensor_count != named.size())
    throw fail("tensor_count " + std::to_string(tensor_count) + " does not match config (" +
               std::to_string(named.size()) + " expected)");

  for (auto& nt : named) {
    std::string header;
    if (!std::getline(f, header)) throw fail("unexpected end of file before tensor '" + nt.name + "'");
    std::istringstream hs(header);
    std::string name, dtype;
    std::size_t rank = 0;
    if (!(hs >> name >> dtype >> rank)) throw fail("malformed tensor header '" + header + "'");
    if (name != nt.name) throw fail("expected tensor '" + nt.name + "', found '" + name + "'");
    if (dtype != detail::dtype_tag<S>())
      throw fail("tensor '" + name + "' has dtype " + dtype + ", expected " +
                 detail::dtype_tag<S>());
    Shape shape(rank);
    for (auto& d : shape)
      if (!(hs >> d)) throw fail("truncated shape for tensor '" + name + "'");
    if (shape != nt.tensor.shape())
      throw fail("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                 shape_str(nt.tensor.shape()));
    Tensor<S> t = nt.tensor;
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (!f) throw fail("truncated data for tensor '" + name + "'");
  }
  return {std::move(params), meta};
}

}  // namespace avglm
