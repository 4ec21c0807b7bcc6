// On-disk artifacts of a training run: adapter parameter files and the
// per-round metrics CSV.
#pragma once

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "facmic/attention_net.hpp"
#include "facmic/federation.hpp"
#include "facmic/feature_store.hpp"

namespace facmic {

/// A trained adapter plus the settings needed to run it.
struct SavedAdapter {
  AttentionParams params;
  AttentionConfig attention;
  double tau = 0.01;
};

// Adapter file, little-endian:
//   "FACP" | u32 version=1 | u32 D | u32 H | f64 leaky_slope | f64 bn_momentum
//   | f64 bn_eps | f64 tau | u64 L | L f64 values in flatten() order
inline void save_adapter(const SavedAdapter& a, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.bytes("FACP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(a.params.d()));
  w.u32(static_cast<std::uint32_t>(a.params.h()));
  w.f64(a.attention.leaky_slope);
  w.f64(a.attention.bn_momentum);
  w.f64(a.attention.bn_eps);
  w.f64(a.tau);
  const auto flat = flatten(a.params);
  w.u64(flat.size());
  for (double v : flat) w.f64(v);
  detail::write_file(path, w.buffer());
}

inline SavedAdapter load_adapter(const std::filesystem::path& path) {
  try {
    detail::ByteReader r(detail::read_file(path));
    if (r.remaining() < 4 || r.bytes(4, "magic") != "FACP")
      throw DataError("bad magic: expected \"FACP\"");
    if (const auto v = r.u32("version"); v != 1)
      throw DataError("unsupported version " + std::to_string(v));
    SavedAdapter a;
    const std::uint32_t d = r.u32("D");
    const std::uint32_t h = r.u32("H");
    a.attention.leaky_slope = r.f64("leaky_slope");
    a.attention.bn_momentum = r.f64("bn_momentum");
    a.attention.bn_eps = r.f64("bn_eps");
    a.tau = r.f64("tau");
    const std::uint64_t len = r.u64("L");
    if (len != flat_count(d, h))
      throw DataError("parameter count " + std::to_string(len) + " does not match D=" +
                      std::to_string(d) + ", H=" + std::to_string(h));
    std::vector<double> flat(len);
    for (auto& v : flat) v = r.f64("values");
    if (r.remaining() != 0) throw DataError("trailing bytes after parameter values");
    a.params = unflatten(flat, d, h);
    return a;
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Shortest round-trip decimal text, independent of the global locale.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf.data(), ptr);
}

inline constexpr std::string_view kMetricsHeader =
    "round,acc,bacc,loss_contr,loss_da,bytes_up,bytes_down";

inline std::string metrics_row(const RoundRecord& r) {
  return std::to_string(r.round) + ',' + format_double(r.acc) + ',' + format_double(r.bacc) +
         ',' + format_double(r.loss_contr) + ',' + format_double(r.loss_da) + ',' +
         std::to_string(r.bytes_up) + ',' + std::to_string(r.bytes_down);
}

inline void write_metrics_csv(std::span<const RoundRecord> records,
                              const std::filesystem::path& path) {
  std::string text(kMetricsHeader);
  text += '\n';
  for (const auto& r : records) text += metrics_row(r) + '\n';
  detail::write_file(path, text);
}

}  // namespace facmic
