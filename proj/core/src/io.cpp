#include "fusereg/io.hpp"

#include <algorithm>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#ifndef FUSEREG_VERSION
#define FUSEREG_VERSION "0.0.0"
#endif

namespace fusereg {

namespace fs = std::filesystem;

std::string engine_version() { return FUSEREG_VERSION; }

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::random_device rd;
  const std::string tmp = path + ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write to '" + tmp + "' failed");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

void write_file_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read from '" + path + "' failed");
  return bytes;
}

namespace {

constexpr char kMagic[4] = {'N', 'M', 'V', '1'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
void put_scalars(std::vector<std::uint8_t>& out, std::span<const T> values) {
  for (T v : values) put_le(out, std::bit_cast<Bits<T>>(v));
}

template <typename T>
void get_scalars(const std::uint8_t* p, std::size_t n, std::vector<double>& out) {
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<T>(get_le<Bits<T>>(p + i * sizeof(T)));
}

std::string hex_bytes(std::span<const std::uint8_t> b) {
  std::string s;
  char buf[4];
  for (auto c : b) {
    std::snprintf(buf, sizeof buf, "%02x", c);
    if (!s.empty()) s += ' ';
    s += buf;
  }
  return s;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_volume(const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (t.rank() == 0 || t.rank() > 255) throw ContractError("volume rank must be 1..255, got " + std::to_string(t.rank()));
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(sizeof(T) == 4 ? Dtype::float32 : Dtype::float64));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) {
    if (e > 0xffffffffu) throw ContractError("volume extent " + std::to_string(e) + " exceeds u32");
    put_le(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + t.numel() * sizeof(T));
  put_scalars<T>(out, t.data());
  return out;
}

VolumeFile decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw TruncatedError("volume: " + std::to_string(bytes.size()) + " bytes, header needs at least 6");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, kMagic)) {
    std::string printable;
    for (std::size_t i = 0; i < 4; ++i) printable += std::isprint(bytes[i]) ? static_cast<char>(bytes[i]) : '.';
    throw BadMagicError("volume: expected magic 'NMV1', found bytes " + hex_bytes(bytes.first(4)) + " ('" +
                        printable + "')");
  }
  if (bytes.size() < 6) throw TruncatedError("volume: header ends after " + std::to_string(bytes.size()) + " bytes");
  VolumeFile v;
  const auto code = bytes[4];
  std::size_t scalar = 0;
  if (code == static_cast<std::uint8_t>(Dtype::float32)) {
    v.dtype = Dtype::float32;
    scalar = 4;
  } else if (code == static_cast<std::uint8_t>(Dtype::float64)) {
    v.dtype = Dtype::float64;
    scalar = 8;
  } else {
    throw UnknownDtypeError("volume: unknown dtype code " + std::to_string(code) + " (1 = float32, 2 = float64)");
  }
  const std::size_t rank = bytes[5];
  if (rank == 0) throw FormatError("volume: rank 0");
  const std::size_t header = 6 + 4 * rank;
  if (bytes.size() < header) {
    throw TruncatedError("volume: header declares rank " + std::to_string(rank) + " but the file has " +
                         std::to_string(bytes.size()) + " bytes");
  }
  std::size_t n = 1;
  for (std::size_t a = 0; a < rank; ++a) {
    v.shape.push_back(get_le<std::uint32_t>(bytes.data() + 6 + 4 * a));
    n *= v.shape.back();
  }
  const std::size_t expected = header + n * scalar;
  if (bytes.size() < expected) {
    throw TruncatedError("volume " + shape_str(v.shape) + ": payload needs " + std::to_string(n * scalar) +
                         " bytes, file has " + std::to_string(bytes.size() - header));
  }
  if (bytes.size() > expected) {
    throw FormatError("volume " + shape_str(v.shape) + ": " + std::to_string(bytes.size() - expected) +
                      " trailing bytes after the payload");
  }
  if (scalar == 4) {
    get_scalars<float>(bytes.data() + header, n, v.values);
  } else {
    get_scalars<double>(bytes.data() + header, n, v.values);
  }
  return v;
}

template <typename T>
void save_volume(const std::string& path, const Tensor<T>& t) {
  write_file_atomic(path, encode_volume(t));
}

VolumeFile read_volume(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_volume(bytes);
  } catch (const FormatError& e) {
    // rethrow with the path, keeping the concrete type
    if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(path + ": " + e.what());
    if (dynamic_cast<const TruncatedError*>(&e)) throw TruncatedError(path + ": " + e.what());
    if (dynamic_cast<const UnknownDtypeError*>(&e)) throw UnknownDtypeError(path + ": " + e.what());
    throw FormatError(path + ": " + e.what());
  }
}

template <typename T>
Tensor<T> load_volume(const std::string& path) {
  auto v = read_volume(path);
  std::vector<T> values(v.values.begin(), v.values.end());
  return Tensor<T>(std::move(v.shape), std::move(values));
}

namespace {

const char* const kCurveHeader = "epoch,train_loss,val_loss,train_ssim,val_ssim";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

double parse_double(const std::string& s, std::size_t line) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (s.empty() || end != begin + s.size()) {
    throw FormatError("curve line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
  return v;
}

}  // namespace

std::string curve_csv(const TrainingCurve& curve) {
  std::string out = std::string(kCurveHeader) + "\n";
  char buf[256];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss,
                  r.train_ssim, r.val_ssim);
    out += buf;
  }
  return out;
}

TrainingCurve parse_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("curve: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCurveHeader) throw FormatError("curve: unexpected header '" + line + "'");
  TrainingCurve curve;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) {
      throw FormatError("curve line " + std::to_string(lineno) + ": expected 5 fields, got " + std::to_string(f.size()));
    }
    TrainingRecord r;
    const double epoch = parse_double(f[0], lineno);
    if (epoch < 0 || epoch != std::floor(epoch)) {
      throw FormatError("curve line " + std::to_string(lineno) + ": epoch '" + f[0] + "' is not a count");
    }
    r.epoch = static_cast<std::size_t>(epoch);
    r.train_loss = parse_double(f[1], lineno);
    r.val_loss = parse_double(f[2], lineno);
    r.train_ssim = parse_double(f[3], lineno);
    r.val_ssim = parse_double(f[4], lineno);
    curve.push_back(r);
  }
  return curve;
}

void export_curve_csv(const TrainingCurve& curve, const std::string& path) { write_file_atomic(path, curve_csv(curve)); }

TrainingCurve import_curve_csv(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return parse_curve_csv(std::string(bytes.begin(), bytes.end()));
}

namespace {

// nlohmann writes non-finite numbers as null
double number_or_nan(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("report: missing field '") + key + "'");
  const auto& v = j.at(key);
  if (v.is_null()) return std::nan("");
  if (!v.is_number()) throw FormatError(std::string("report: field '") + key + "' is not a number");
  return v.get<double>();
}

}  // namespace

nlohmann::json report_to_json(const RegistrationReport& r, const std::string& config_hash) {
  return nlohmann::json{
      {"ssim", r.ssim},
      {"hd95", r.hd95},
      {"sdlogj", r.sdlogj},
      {"ncc", r.ncc},
      {"loss_total", r.loss_total},
      {"loss_sim", r.loss_sim},
      {"loss_smooth", r.loss_smooth},
      {"nonpositive_jacobian_fraction", r.nonpositive_jacobian_fraction},
      {"config_hash", config_hash},
      {"version", engine_version()},
  };
}

RegistrationReport report_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("report must be a JSON object");
  RegistrationReport r;
  r.ssim = number_or_nan(j, "ssim");
  r.hd95 = number_or_nan(j, "hd95");
  r.sdlogj = number_or_nan(j, "sdlogj");
  r.ncc = number_or_nan(j, "ncc");
  r.loss_total = number_or_nan(j, "loss_total");
  r.loss_sim = number_or_nan(j, "loss_sim");
  r.loss_smooth = number_or_nan(j, "loss_smooth");
  r.nonpositive_jacobian_fraction = number_or_nan(j, "nonpositive_jacobian_fraction");
  return r;
}

void save_report(const std::string& path, const RegistrationReport& report, const std::string& config_hash) {
  write_file_atomic(path, report_to_json(report, config_hash).dump(2) + "\n");
}

RegistrationReport load_report(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return report_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report '" + path + "': " + e.what());
  }
}

namespace {

nlohmann::json arrays_to_json(const std::vector<NamedArray>& arrays) {
  auto out = nlohmann::json::array();
  for (const auto& a : arrays) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(a.values.size() * 8);
    put_scalars<double>(bytes, a.values);
    out.push_back({{"name", a.name}, {"shape", a.shape}, {"values", nlohmann::json::binary(std::move(bytes))}});
  }
  return out;
}

std::vector<NamedArray> arrays_from_json(const nlohmann::json& j) {
  std::vector<NamedArray> out;
  for (const auto& e : j) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.shape = e.at("shape").get<Shape>();
    const auto& bytes = e.at("values").get_binary();
    const std::size_t n = shape_numel(a.shape);
    if (bytes.size() != n * 8) {
      throw FormatError("checkpoint array '" + a.name + "' " + shape_str(a.shape) + " holds " +
                        std::to_string(bytes.size()) + " bytes, expected " + std::to_string(n * 8));
    }
    get_scalars<double>(bytes.data(), n, a.values);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  auto curve = nlohmann::json::array();
  for (const auto& r : c.curve) {
    curve.push_back({r.epoch, r.train_loss, r.val_loss, r.train_ssim, r.val_ssim});
  }
  const nlohmann::json j{
      {"format", "fusereg-checkpoint"},
      {"format_version", 1},
      {"version", engine_version()},
      {"config", to_json(c.config)},
      {"params", arrays_to_json(c.params)},
      {"velocity", arrays_to_json(c.velocity)},
      {"epoch", c.epoch},
      {"rng_state", c.rng_state},
      {"curve", curve},
      {"best_val_ssim", c.best_val_ssim},
      {"best_epoch", c.best_epoch},
  };
  return nlohmann::json::to_cbor(j);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint is not valid CBOR: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", "") != "fusereg-checkpoint") {
      throw FormatError("not a fusereg checkpoint");
    }
    if (j.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported checkpoint format_version " + j.at("format_version").dump());
    }
    Checkpoint c;
    c.config = config_from_json(j.at("config"));
    c.params = arrays_from_json(j.at("params"));
    c.velocity = arrays_from_json(j.at("velocity"));
    c.epoch = j.at("epoch").get<std::size_t>();
    c.rng_state = j.at("rng_state").get<std::string>();
    for (const auto& r : j.at("curve")) {
      if (!r.is_array() || r.size() != 5) throw FormatError("checkpoint curve rows must have 5 entries");
      c.curve.push_back({r[0].get<std::size_t>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(),
                         r[4].get<double>()});
    }
    c.best_val_ssim = j.at("best_val_ssim").get<double>();
    c.best_epoch = j.at("best_epoch").get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void save_pair(const std::string& dir, const SynthPair& pair) {
  fs::create_directories(dir);
  const fs::path d(dir);
  save_volume((d / "moving.nmv").string(), pair.moving);
  save_volume((d / "fixed.nmv").string(), pair.fixed);
  save_volume((d / "field.nmv").string(), pair.field);
}

namespace {

bool is_pair_dir(const fs::path& d) {
  return fs::is_regular_file(d / "moving.nmv") && fs::is_regular_file(d / "fixed.nmv");
}

Tensor<double> load_single_channel(const fs::path& p) {
  auto v = read_volume(p.string());
  if (v.shape.size() == 3) v.shape.insert(v.shape.begin(), 1);
  if (v.shape.size() != 4 || v.shape[0] != 1) {
    throw FormatError(p.string() + ": expected a [D,H,W] or [1,D,H,W] volume, got " + shape_str(v.shape));
  }
  return Tensor<double>(std::move(v.shape), std::move(v.values));
}

VolumePair load_pair(const fs::path& d) {
  VolumePair p;
  p.name = d.filename().string();
  p.moving = load_single_channel(d / "moving.nmv");
  p.fixed = load_single_channel(d / "fixed.nmv");
  if (p.moving.shape() != p.fixed.shape()) {
    throw FormatError(d.string() + ": moving " + shape_str(p.moving.shape()) + " and fixed " +
                      shape_str(p.fixed.shape()) + " differ in shape");
  }
  return p;
}

}  // namespace

std::vector<VolumePair> load_pairs(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("data directory '" + dir + "' does not exist");
  std::vector<VolumePair> pairs;
  if (is_pair_dir(root)) pairs.push_back(load_pair(root));
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && is_pair_dir(e.path())) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) pairs.push_back(load_pair(d));
  if (pairs.empty()) throw FormatError("no moving.nmv/fixed.nmv pairs under '" + dir + "'");
  return pairs;
}

template std::vector<std::uint8_t> encode_volume(const Tensor<float>&);
template std::vector<std::uint8_t> encode_volume(const Tensor<double>&);
template void save_volume(const std::string&, const Tensor<float>&);
template void save_volume(const std::string&, const Tensor<double>&);
template Tensor<float> load_volume(const std::string&);
template Tensor<double> load_volume(const std::string&);

}  // namespace fusereg
