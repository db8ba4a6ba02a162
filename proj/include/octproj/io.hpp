#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>

#include "octproj/tensor.hpp"

namespace octproj::io {

namespace fs = std::filesystem;

enum class Modality { OCT, OCTA };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct VolumeMeta {
  std::string subject_id;
  Modality modality = Modality::OCT;
  std::size_t D = 1, H = 1, W = 1;
  // Encoding range of the source intensities; on-disk slices are always
  // normalized to [0, 1] on read.
  std::pair<double, double> intensity_range{0.0, 1.0};

  void validate() const;
};

// Binary P5 only. Values come back as v / maxval.
Tensor read_pgm(const fs::path& path);
// Clamps to [0, 1] and quantizes with round-half-up. maxval is 255 or 65535.
void write_pgm(const Tensor& image, const fs::path& path, int maxval = 255);
// The exact values read_pgm returns for an image written with write_pgm.
Tensor quantize(const Tensor& t, int maxval);

// "DTSR" container: u16 version, u8 dtype (0 = f32), u8 ndim, ndim x u32
// extents, little-endian f32 payload.
Tensor read_tsr(const fs::path& path);
void write_tsr(const Tensor& t, const fs::path& path);

struct Volume {
  VolumeMeta meta;
  Tensor data;  // [D, H, W]
};

// Directory with meta.json and slice_0000.pgm ... slice_{D-1}.pgm.
Volume load_volume(const fs::path& dir);
void save_volume(const fs::path& dir, const VolumeMeta& meta, const Tensor& data, int maxval = 65535);

}  // namespace octproj::io
