#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "cta/config.hpp"
#include "cta/train.hpp"

namespace cta {

inline constexpr char kCheckpointMagic[4] = {'C', 'T', 'A', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (little-endian):
///   "CTA1" | u32 version | u32 len + model config text
///   | u32 count, then per parameter: u32 len + name, tensor
///   | u8 has_optimizer [u64 step, per parameter: m tensor, v tensor]
///   | u64 epochs completed | u64 rng key | u64 rng counter
template <typename T>
struct Checkpoint {
  CtaNet<T> net;
  std::optional<OptimizerState<T>> optimizer;
  std::uint64_t epoch = 0;
  CounterRng rng;

  explicit Checkpoint(CtaNet<T> n, std::optional<OptimizerState<T>> opt = std::nullopt, std::uint64_t e = 0,
                      CounterRng r = CounterRng(0))
      : net(std::move(n)), optimizer(std::move(opt)), epoch(e), rng(r) {}
};

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = io::read_le<std::uint32_t>(is, what);
  if (n > (1u << 24)) throw FormatError(std::string("implausible ") + what + " length " + std::to_string(n));
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError(std::string("truncated ") + what);
  return s;
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& os, const Checkpoint<T>& ck) {
  os.write(kCheckpointMagic, 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_string(os, model_config_text(ck.net.cfg));
  const auto params = ck.net.parameters();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_string(os, p.name);
    write_tensor(os, p.var.value());
  }
  io::write_le<std::uint8_t>(os, ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& st = *ck.optimizer;
    if (st.m.size() != params.size() || st.v.size() != params.size())
      throw ContractError("optimizer state does not match the parameter list");
    io::write_le<std::uint64_t>(os, st.step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_tensor(os, st.m[i]);
      write_tensor(os, st.v[i]);
    }
  }
  io::write_le<std::uint64_t>(os, ck.epoch);
  io::write_le<std::uint64_t>(os, ck.rng.key());
  io::write_le<std::uint64_t>(os, ck.rng.counter());
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4)) throw FormatError("checkpoint truncated before magic");
  if (!std::equal(magic, magic + 4, kCheckpointMagic))
    throw FormatError("bad checkpoint magic '" + std::string(magic, 4) + "' (expected CTA1)");
  const auto version = io::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  ModelConfig cfg;
  try {
    cfg = parse_model_config_text(detail::read_string(is, "model config"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }
  Checkpoint<T> ck(model_init<T>(cfg, 0));
  const auto params = ck.net.parameters();
  const auto count = io::read_le<std::uint32_t>(is, "parameter count");
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                      std::to_string(params.size()));
  for (auto p : params) {
    const auto name = detail::read_string(is, "parameter name");
    if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    auto t = read_tensor<T>(is);
    if (t.shape() != p.var.shape())
      throw FormatError("tensor " + name + " has shape " + to_string(t.shape()) + ", expected " +
                        to_string(p.var.shape()));
    p.var.mutable_value() = std::move(t);
  }
  const auto has_opt = io::read_le<std::uint8_t>(is, "optimizer flag");
  if (has_opt > 1) throw FormatError("bad optimizer flag " + std::to_string(has_opt));
  if (has_opt) {
    OptimizerState<T> st;
    st.step = io::read_le<std::uint64_t>(is, "optimizer step");
    for (const auto& p : params) {
      st.m.push_back(read_tensor<T>(is));
      st.v.push_back(read_tensor<T>(is));
      if (st.m.back().shape() != p.var.shape() || st.v.back().shape() != p.var.shape())
        throw FormatError("optimizer moments for " + p.name + " do not match the parameter shape");
    }
    ck.optimizer = std::move(st);
  }
  ck.epoch = io::read_le<std::uint64_t>(is, "epoch");
  const auto key = io::read_le<std::uint64_t>(is, "rng key");
  const auto counter = io::read_le<std::uint64_t>(is, "rng counter");
  ck.rng = CounterRng(key, counter);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  write_checkpoint(os, ck);
  if (!os) throw ConfigError("write failed for checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint<T>(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// "f32" or "f64", from the first stored tensor.
inline std::string checkpoint_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic))
    throw FormatError(path.string() + ": bad checkpoint magic");
  io::read_le<std::uint32_t>(is, "checkpoint version");
  detail::read_string(is, "model config");
  if (io::read_le<std::uint32_t>(is, "parameter count") == 0) throw FormatError(path.string() + ": no tensors");
  detail::read_string(is, "parameter name");
  return io::read_le<std::uint8_t>(is, "tensor dtype") == 0 ? "f32" : "f64";
}

}  // namespace cta
