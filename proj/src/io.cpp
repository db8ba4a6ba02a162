#include "octproj/io.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include <json.hpp>

namespace octproj::io {
namespace {

using json = nlohmann::json;

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

// Header tokenizer for PGM: whitespace separated, '#' comments to end of line.
class PgmHeader {
 public:
  PgmHeader(const std::vector<unsigned char>& bytes, const fs::path& path) : b_(bytes), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    std::string tok;
    while (pos_ < b_.size() && !std::isspace(b_[pos_]) && b_[pos_] != '#') tok.push_back(char(b_[pos_++]));
    if (tok.empty()) throw FormatError("truncated PGM header in " + path_.string());
    return tok;
  }

  long number() {
    const std::string tok = token();
    for (char c : tok) {
      if (!std::isdigit(static_cast<unsigned char>(c))) throw FormatError("bad PGM header field '" + tok + "'");
    }
    if (tok.size() > 9) throw FormatError("PGM header field too large: " + tok);
    return std::stol(tok);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t payload_offset() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw FormatError("missing whitespace before PGM raster");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& b_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

float level_to_unit(unsigned level, int maxval) {
  return static_cast<float>(static_cast<double>(level) / maxval);
}

unsigned unit_to_level(float v, int maxval) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<unsigned>(std::floor(c * maxval + 0.5));
}

void check_maxval(int maxval) {
  if (maxval != 255 && maxval != 65535) throw ContractError("PGM maxval must be 255 or 65535, got " + std::to_string(maxval));
}

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<unsigned char>& in, std::size_t& pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T(in[pos + i]) << (8 * i));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string to_string(Modality m) { return m == Modality::OCT ? "OCT" : "OCTA"; }

Modality modality_from_string(const std::string& s) {
  if (s == "OCT") return Modality::OCT;
  if (s == "OCTA") return Modality::OCTA;
  throw FormatError("unknown modality '" + s + "'");
}

void VolumeMeta::validate() const {
  if (D < 1 || H < 1 || W < 1) throw ContractError("volume extents must be >= 1");
  if (!(intensity_range.first < intensity_range.second)) throw ContractError("intensity_range needs lo < hi");
}

Tensor read_pgm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  PgmHeader header(bytes, path);
  const std::string magic = header.token();
  if (magic != "P5") throw FormatError("only binary P5 PGM is supported, got '" + magic + "' in " + path.string());
  const long width = header.number();
  const long height = header.number();
  const long maxval = header.number();
  if (width < 1 || height < 1) throw FormatError("PGM extents must be positive in " + path.string());
  if (maxval != 255 && maxval != 65535) throw FormatError("PGM maxval must be 255 or 65535 in " + path.string());
  const std::size_t offset = header.payload_offset();

  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  const std::size_t bpp = maxval == 255 ? 1 : 2;
  if (bytes.size() < offset + n * bpp) throw IoError("truncated PGM payload in " + path.string());

  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned level = bytes[offset + i * bpp];
    if (bpp == 2) level = (level << 8) | bytes[offset + i * bpp + 1];  // big-endian
    if (level > static_cast<unsigned>(maxval)) throw FormatError("PGM sample exceeds maxval in " + path.string());
    values[i] = level_to_unit(level, int(maxval));
  }
  return Tensor({std::size_t(height), std::size_t(width)}, std::move(values));
}

Tensor quantize(const Tensor& t, int maxval) {
  check_maxval(maxval);
  std::vector<float> q(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) q[i] = level_to_unit(unit_to_level(t[i], maxval), maxval);
  return Tensor(t.dims(), std::move(q));
}

void write_pgm(const Tensor& image, const fs::path& path, int maxval) {
  if (image.ndim() != 2) throw ShapeError("write_pgm needs a 2-D tensor, got " + shape_str(image.dims()));
  check_maxval(maxval);
  const std::string header =
      "P5\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n" + std::to_string(maxval) + "\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + image.size() * (maxval == 255 ? 1 : 2));
  for (float v : image.data()) {
    const unsigned level = unit_to_level(v, maxval);
    if (maxval == 255) {
      bytes.push_back(static_cast<unsigned char>(level));
    } else {
      bytes.push_back(static_cast<unsigned char>(level >> 8));
      bytes.push_back(static_cast<unsigned char>(level & 0xff));
    }
  }
  write_bytes(path, bytes);
}

Tensor read_tsr(const fs::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 8) throw FormatError("TSR header truncated in " + path.string());
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "DTSR")) throw FormatError("bad TSR magic in " + path.string());
  std::size_t pos = 4;
  const auto version = get_le<std::uint16_t>(bytes, pos);
  const auto dtype = bytes[pos++];
  const auto ndim = bytes[pos++];
  if (version != 1) throw FormatError("unsupported TSR version " + std::to_string(version));
  if (dtype != 0) throw FormatError("unsupported TSR dtype code " + std::to_string(dtype));
  if (ndim == 0 || ndim > 8) throw FormatError("TSR ndim must be in [1, 8], got " + std::to_string(ndim));
  if (bytes.size() < pos + 4u * ndim) throw FormatError("TSR extents truncated in " + path.string());
  Shape dims(ndim);
  for (auto& d : dims) {
    d = get_le<std::uint32_t>(bytes, pos);
    if (d == 0) throw FormatError("TSR extent of 0 in " + path.string());
  }
  const std::size_t n = shape_numel(dims);
  if (bytes.size() < pos + 4 * n) throw IoError("truncated TSR payload in " + path.string());
  if (bytes.size() > pos + 4 * n) throw FormatError("trailing bytes after TSR payload in " + path.string());
  std::vector<float> values(n);
  for (auto& v : values) {
    const auto bits = get_le<std::uint32_t>(bytes, pos);
    std::memcpy(&v, &bits, sizeof v);
  }
  return Tensor(std::move(dims), std::move(values));
}

void write_tsr(const Tensor& t, const fs::path& path) {
  if (t.empty()) throw ShapeError("cannot write an empty tensor");
  if (t.ndim() > 8) throw ShapeError("TSR supports at most 8 dimensions");
  std::vector<unsigned char> bytes{'D', 'T', 'S', 'R'};
  put_le<std::uint16_t>(bytes, 1);
  bytes.push_back(0);
  bytes.push_back(static_cast<unsigned char>(t.ndim()));
  for (auto d : t.dims()) put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(d));
  bytes.reserve(bytes.size() + 4 * t.size());
  for (float v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_le<std::uint32_t>(bytes, bits);
  }
  write_bytes(path, bytes);
}

Volume load_volume(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw ConsistencyError("missing " + meta_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("invalid JSON in " + meta_path.string() + ": " + e.what());
  }
  VolumeMeta meta;
  try {
    meta.subject_id = j.at("subject_id").get<std::string>();
    meta.modality = modality_from_string(j.at("modality").get<std::string>());
    meta.D = j.at("D").get<std::size_t>();
    meta.H = j.at("H").get<std::size_t>();
    meta.W = j.at("W").get<std::size_t>();
    if (j.contains("intensity_range")) {
      meta.intensity_range = {j["intensity_range"].at(0).get<double>(), j["intensity_range"].at(1).get<double>()};
    }
  } catch (const json::exception& e) {
    throw FormatError("bad meta.json in " + dir.string() + ": " + e.what());
  }
  meta.validate();

  std::vector<float> data;
  data.reserve(meta.D * meta.H * meta.W);
  for (std::size_t d = 0; d < meta.D; ++d) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%04zu.pgm", d);
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw ConsistencyError("volume " + dir.string() + " is missing " + name);
    const Tensor s = read_pgm(p);
    if (s.dim(0) != meta.H || s.dim(1) != meta.W) {
      throw ConsistencyError(std::string(name) + " is " + shape_str(s.dims()) + " but meta.json says H=" +
                             std::to_string(meta.H) + " W=" + std::to_string(meta.W));
    }
    data.insert(data.end(), s.data().begin(), s.data().end());
  }
  return {meta, Tensor({meta.D, meta.H, meta.W}, std::move(data))};
}

void save_volume(const fs::path& dir, const VolumeMeta& meta, const Tensor& data, int maxval) {
  meta.validate();
  if (data.dims() != Shape{meta.D, meta.H, meta.W}) {
    throw ShapeError("volume data " + shape_str(data.dims()) + " disagrees with meta");
  }
  fs::create_directories(dir);
  json j = {{"subject_id", meta.subject_id},
            {"modality", to_string(meta.modality)},
            {"D", meta.D},
            {"H", meta.H},
            {"W", meta.W},
            {"intensity_range", {meta.intensity_range.first, meta.intensity_range.second}}};
  std::ofstream(dir / "meta.json") << j.dump(2) << "\n";
  for (std::size_t d = 0; d < meta.D; ++d) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%04zu.pgm", d);
    write_pgm(data.sub(d), dir / name, maxval);
  }
}

}  // namespace octproj::io
