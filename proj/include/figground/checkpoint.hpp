#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "figground/model.hpp"
#include "figground/tokenizer.hpp"
#include "figground/train.hpp"

namespace figground {

// ---------------------------------------------------------------------------
// Checkpoint file:
//   "FGCKPT01" | u32 format version | u8 precision (4 = f32, 8 = f64)
//   | u32 layers, heads, d_model, mlp_hidden, vocab, positions | f64 ln_eps
//   | u64 seed | u64 optimizer step | u8 has optimizer state
//   | parameter tensors in Parameters::visit order (native little-endian)
//   | [Adam first moments | Adam second moments]
//   | u64 FNV-1a checksum of all preceding bytes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "FGCKPT01";

template <typename T>
struct Checkpoint {
  Parameters<T> params;
  std::optional<AdamState<T>> optimizer;
};

template <typename T>
std::string serialize_checkpoint(const Parameters<T>& params, const AdamState<T>* optimizer = nullptr) {
  const ModelConfig& c = params.config;
  std::string out(kCheckpointMagic);
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint8_t>(precision_of<T>()));
  for (int v : {c.layers, c.heads, c.d_model, c.mlp_hidden, c.vocab, c.positions}) detail::put(out, static_cast<std::uint32_t>(v));
  detail::put(out, c.ln_eps);
  detail::put(out, c.seed);
  detail::put(out, static_cast<std::uint64_t>(optimizer ? optimizer->step : 0));
  detail::put(out, static_cast<std::uint8_t>(optimizer ? 1 : 0));
  auto dump = [&](std::string_view, std::span<const T> s) {
    out.append(reinterpret_cast<const char*>(s.data()), s.size_bytes());
  };
  params.visit(dump);
  if (optimizer) {
    optimizer->m.visit(dump);
    optimizer->v.visit(dump);
  }
  detail::put(out, fnv1a64(out));
  return out;
}

/// Reads the configuration stored in a checkpoint header without requiring
/// the caller to know its precision.
inline ModelConfig peek_checkpoint_config(std::string_view bytes) {
  const std::string_view payload = detail::verified_payload(bytes);
  if (payload.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) fail(ErrorCode::VersionMismatch, "not a checkpoint file");
  detail::Reader rd(payload.substr(kCheckpointMagic.size()));
  if (rd.get<std::uint32_t>() != kCheckpointVersion) fail(ErrorCode::VersionMismatch, "unsupported checkpoint version");
  ModelConfig c;
  const auto prec = rd.get<std::uint8_t>();
  if (prec != 4 && prec != 8) fail(ErrorCode::VersionMismatch, "unknown precision tag");
  c.precision = static_cast<Precision>(prec);
  c.layers = static_cast<int>(rd.get<std::uint32_t>());
  c.heads = static_cast<int>(rd.get<std::uint32_t>());
  c.d_model = static_cast<int>(rd.get<std::uint32_t>());
  c.mlp_hidden = static_cast<int>(rd.get<std::uint32_t>());
  c.vocab = static_cast<int>(rd.get<std::uint32_t>());
  c.positions = static_cast<int>(rd.get<std::uint32_t>());
  c.ln_eps = rd.get<double>();
  c.seed = rd.get<std::uint64_t>();
  return c;
}

template <typename T>
Checkpoint<T> deserialize_checkpoint(std::string_view bytes) {
  const ModelConfig cfg = peek_checkpoint_config(bytes);
  if (cfg.precision != precision_of<T>())
    fail(ErrorCode::VersionMismatch, "checkpoint precision " + std::string(to_string(cfg.precision)) + " differs from the requested " +
                                         std::string(to_string(precision_of<T>())));
  cfg.validate();
  const std::string_view payload = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  detail::Reader rd(payload.substr(kCheckpointMagic.size()));
  (void)rd.get<std::uint32_t>();
  (void)rd.get<std::uint8_t>();
  for (int i = 0; i < 6; ++i) (void)rd.get<std::uint32_t>();
  (void)rd.get<double>();
  (void)rd.get<std::uint64_t>();
  const auto step = rd.get<std::uint64_t>();
  const bool has_opt = rd.get<std::uint8_t>() != 0;

  std::size_t pos = kCheckpointMagic.size() + rd.position();
  auto load = [&](std::string_view, std::span<T> s) {
    if (pos + s.size_bytes() > payload.size()) fail(ErrorCode::ChecksumMismatch, "checkpoint payload too short");
    std::memcpy(s.data(), payload.data() + pos, s.size_bytes());
    pos += s.size_bytes();
  };
  Checkpoint<T> ck{Parameters<T>::zeros(cfg), std::nullopt};
  ck.params.visit(load);
  if (has_opt) {
    AdamState<T> st = AdamState<T>::zeros(cfg);
    st.m.visit(load);
    st.v.visit(load);
    st.step = step;
    ck.optimizer = std::move(st);
  }
  if (pos != payload.size()) fail(ErrorCode::ChecksumMismatch, "trailing bytes in checkpoint");
  return ck;
}

template <typename T>
void save_checkpoint(const Parameters<T>& params, const std::string& path, const AdamState<T>* optimizer = nullptr) {
  detail::write_file(path, serialize_checkpoint(params, optimizer));
}

template <typename T>
Checkpoint<T> load_checkpoint_with_state(const std::string& path) {
  return deserialize_checkpoint<T>(detail::read_file(path));
}

template <typename T>
Parameters<T> load_checkpoint(const std::string& path) {
  return load_checkpoint_with_state<T>(path).params;
}

}  // namespace figground
