#pragma once

#include <cstdint>
#include <filesystem>
#include <algorithm>
#include <string>
#include <vector>

#include "dpffn/io.hpp"
#include "dpffn/synth.hpp"

namespace dpffn {

inline constexpr std::string_view kPhrpMagic{"PHRP1\0", 6};

struct PhrpHeader {
  std::uint32_t sample_count = 0;
  std::uint32_t max_steps = 0;
  std::uint32_t bins = 0;
  std::uint32_t num_classes = 0;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& data) {
  auto p = data;
  p += ".json";
  return p;
}

inline io::Bytes encode_phrp(const std::vector<DualPolSample>& samples, std::uint32_t num_classes) {
  if (samples.empty()) throw DataError("cannot write an empty dataset");
  const std::size_t L = samples.front().bins;
  std::size_t t_max = 0;
  for (const auto& s : samples) {
    s.validate();
    if (s.bins != L) throw DataError("samples disagree on the number of range bins");
    if (!s.has_vh()) throw DataError("PHRP samples must carry both channels");
    if (s.label < 0 || static_cast<std::uint32_t>(s.label) >= num_classes) throw DataError("sample label out of range");
    t_max = std::max(t_max, s.steps);
  }
  io::Writer w;
  w.bytes(kPhrpMagic);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  w.u32(static_cast<std::uint32_t>(t_max));
  w.u32(static_cast<std::uint32_t>(L));
  w.u32(num_classes);
  for (const auto& s : samples) {
    w.u32(static_cast<std::uint32_t>(s.steps));
    w.u16(static_cast<std::uint16_t>(s.label));
    w.u16(static_cast<std::uint16_t>(s.posture_id));
    for (float v : s.hh) w.f32(v);
    for (float v : s.vh) w.f32(v);
  }
  return w.take();
}

inline PhrpHeader decode_phrp_header(io::Reader& r) {
  if (r.bytes(kPhrpMagic.size()) != kPhrpMagic) throw DataError(r.what() + ": bad magic, not a PHRP dataset");
  PhrpHeader h;
  h.sample_count = r.u32();
  h.max_steps = r.u32();
  h.bins = r.u32();
  h.num_classes = r.u32();
  return h;
}

inline PhrpHeader read_phrp_header(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, path.string());
  return decode_phrp_header(r);
}

inline std::vector<DualPolSample> decode_phrp(const io::Bytes& bytes, const std::string& what, PhrpHeader* header) {
  io::Reader r(bytes, what);
  const auto h = decode_phrp_header(r);
  if (h.bins == 0) throw DataError(what + ": zero range bins");
  std::vector<DualPolSample> samples;
  samples.reserve(h.sample_count);
  for (std::uint32_t i = 0; i < h.sample_count; ++i) {
    DualPolSample s;
    s.steps = r.u32();
    s.bins = h.bins;
    s.label = r.u16();
    s.posture_id = r.u16();
    if (s.steps == 0 || s.steps > h.max_steps) throw DataError(what + ": sample " + std::to_string(i) + " has bad T");
    if (static_cast<std::uint32_t>(s.label) >= h.num_classes)
      throw DataError(what + ": sample " + std::to_string(i) + " label out of range");
    const std::size_t n = s.steps * s.bins;
    r.need(8 * n);
    s.hh.resize(n);
    s.vh.resize(n);
    for (auto& v : s.hh) v = r.f32();
    for (auto& v : s.vh) v = r.f32();
    samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw DataError(what + ": trailing bytes after last sample");
  if (header) *header = h;
  return samples;
}

inline Json dataset_manifest(const Dataset& ds) {
  return Json{{"format", "PHRP1"}, {"samples", ds.samples.size()}, {"spec", ds.spec}, {"split", ds.split}};
}

/// Writes the binary file and its JSON sidecar, each atomically.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_atomic(path, encode_phrp(ds.samples, static_cast<std::uint32_t>(ds.spec.num_classes)));
  io::write_atomic(manifest_path(path), dataset_manifest(ds).dump(2) + "\n");
}

/// Reads samples plus the sidecar spec and split. Without a sidecar the
/// split is unknown and every posture counts as training data.
inline Dataset read_dataset(const std::filesystem::path& path, bool require_manifest = true) {
  PhrpHeader h;
  Dataset ds;
  ds.samples = decode_phrp(io::read_file(path), path.string(), &h);
  const auto mp = manifest_path(path);
  if (std::filesystem::exists(mp)) {
    Json j;
    try {
      j = Json::parse(io::read_text(mp));
    } catch (const Json::exception& e) {
      throw DataError(mp.string() + ": " + e.what());
    }
    try {
      ds.spec = j.at("spec").get<DatasetSpec>();
      ds.split = j.at("split").get<PostureSplit>();
    } catch (const Json::exception& e) {
      throw DataError(mp.string() + ": " + e.what());
    } catch (const ConfigError& e) {
      throw DataError(mp.string() + ": " + e.what());
    }
    if (ds.split.train.size() != h.num_classes)
      throw DataError(mp.string() + ": split covers " + std::to_string(ds.split.train.size()) + " classes, file has " +
                      std::to_string(h.num_classes));
  } else {
    if (require_manifest) throw DataError("missing split manifest '" + mp.string() + "'");
    ds.spec.num_classes = static_cast<int>(h.num_classes);
    ds.spec.radar.range_bins = static_cast<int>(h.bins);
    ds.split.train.assign(h.num_classes, {});
    ds.split.test.assign(h.num_classes, {});
    for (const auto& s : ds.samples) {
      auto& v = ds.split.train[static_cast<std::size_t>(s.label)];
      if (std::find(v.begin(), v.end(), s.posture_id) == v.end()) v.push_back(s.posture_id);
    }
  }
  return ds;
}

}  // namespace dpffn
