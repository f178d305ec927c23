#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusereg/synth.hpp"
#include "fusereg/train.hpp"

namespace fusereg {

std::string engine_version();

// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::string& path, const std::string& text);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

enum class Dtype : std::uint8_t { float32 = 1, float64 = 2 };

// NMV1 container: "NMV1", u8 dtype, u8 rank, rank x u32 extents, then the
// payload. All integers and scalars little-endian, row-major.
struct VolumeFile {
  Dtype dtype = Dtype::float64;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes
};

template <typename T>
std::vector<std::uint8_t> encode_volume(const Tensor<T>& t);
VolumeFile decode_volume(std::span<const std::uint8_t> bytes);

template <typename T>
void save_volume(const std::string& path, const Tensor<T>& t);
VolumeFile read_volume(const std::string& path);
// Converts to T whatever dtype the file holds.
template <typename T>
Tensor<T> load_volume(const std::string& path);

std::string curve_csv(const TrainingCurve& curve);
TrainingCurve parse_curve_csv(const std::string& text);
void export_curve_csv(const TrainingCurve& curve, const std::string& path);
TrainingCurve import_curve_csv(const std::string& path);

nlohmann::json report_to_json(const RegistrationReport& report, const std::string& config_hash);
RegistrationReport report_from_json(const nlohmann::json& j);
void save_report(const std::string& path, const RegistrationReport& report, const std::string& config_hash);
RegistrationReport load_report(const std::string& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// A pair directory holds moving.nmv and fixed.nmv (and field.nmv from synth).
void save_pair(const std::string& dir, const SynthPair& pair);
// Reads `dir` itself if it is a pair directory, plus every immediate
// subdirectory that is one, in name order.
std::vector<VolumePair> load_pairs(const std::string& dir);

}  // namespace fusereg
