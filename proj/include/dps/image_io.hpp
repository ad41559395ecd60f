#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dps/synth.hpp"
#include "dps/tensor.hpp"

namespace dps {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace io_detail {

inline unsigned char to_byte(real v) {
  const double x = std::min(std::max(static_cast<double>(v), 0.0), 1.0) * 255.0;
  return static_cast<unsigned char>(std::lround(x));
}

inline int next_header_int(std::istream& in, const std::string& path) {
  // PNM headers allow whitespace and '#' comments between fields
  int c;
  while ((c = in.peek()) != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value)) throw IoError(path + ": malformed PNM header");
  return value;
}

}  // namespace io_detail

/// Binary PGM (P5), maxval 255. Expects a (1,H,W) tensor in [0,1].
inline void write_pgm(const std::string& path, const Tensor& t) {
  if (t.rank() != 3 || t.size(0) != 1)
    shape_error("write_pgm: expected (1,H,W), got " + shape_str(t.shape()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  const std::int64_t H = t.size(1), W = t.size(2);
  f << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W));
  const real* v = t.data();
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) row[static_cast<std::size_t>(x)] = io_detail::to_byte(v[y * W + x]);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError(path + ": write failed");
}

/// Binary PPM (P6), maxval 255. Expects a (3,H,W) tensor in [0,1].
inline void write_ppm(const std::string& path, const Tensor& t) {
  if (t.rank() != 3 || t.size(0) != 3)
    shape_error("write_ppm: expected (3,H,W), got " + shape_str(t.shape()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  const std::int64_t H = t.size(1), W = t.size(2);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(3 * W));
  const real* v = t.data();
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(3 * x + c)] = io_detail::to_byte(v[(c * H + y) * W + x]);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError(path + ": write failed");
}

/// Reads a binary PGM (P5) or PPM (P6) into a (1,H,W) or (3,H,W) tensor
/// scaled to [0,1]. 8-bit data round-trips exactly through write/read.
inline Tensor read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  std::string magic;
  f >> magic;
  int channels;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw IoError(path + ": unsupported format '" + magic + "' (expected binary P5/P6)");
  const int W = io_detail::next_header_int(f, path);
  const int H = io_detail::next_header_int(f, path);
  const int maxval = io_detail::next_header_int(f, path);
  if (W <= 0 || H <= 0) throw IoError(path + ": bad raster size");
  if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
  f.get();  // the single whitespace byte terminating the header
  std::vector<unsigned char> raw(static_cast<std::size_t>(channels) * static_cast<std::size_t>(W) *
                                 static_cast<std::size_t>(H));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError(path + ": truncated raster data");
  Tensor t = Tensor::zeros({channels, H, W});
  real* v = t.values().data();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      for (int c = 0; c < channels; ++c)
        v[(static_cast<std::int64_t>(c) * H + y) * W + x] =
            static_cast<real>(raw[static_cast<std::size_t>((y * W + x) * channels + c)]) /
            static_cast<real>(255);
  return t;
}

inline std::string sample_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return buf;
}

/// Layout: <root>/images/NNNN.ppm, <root>/masks/NNNN.pgm,
/// <root>/boundaries/NNNN.pgm.
inline void write_dataset(const std::string& root, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "masks", "boundaries"}) {
    fs::create_directories(fs::path(root) / sub, ec);
    if (ec) throw IoError(root + "/" + sub + ": cannot create directory (" + ec.message() + ")");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string n = sample_name(static_cast<int>(i));
    write_ppm((fs::path(root) / "images" / (n + ".ppm")).string(), samples[i].image);
    write_pgm((fs::path(root) / "masks" / (n + ".pgm")).string(), samples[i].mask);
    write_pgm((fs::path(root) / "boundaries" / (n + ".pgm")).string(), samples[i].boundary);
  }
}

inline Tensor binarize(const Tensor& t) {
  Tensor out = Tensor::zeros(t.shape());
  for (std::size_t i = 0; i < t.values().size(); ++i)
    out.values()[i] = t.values()[i] > static_cast<real>(0.5) ? 1 : 0;
  return out;
}

inline std::vector<Sample> read_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(root) / "images";
  if (!fs::is_directory(images)) throw IoError(root + ": missing images/ directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(images))
    if (e.path().extension() == ".ppm") names.push_back(e.path().stem().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError(root + ": no .ppm images found");
  std::vector<Sample> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    Sample s;
    s.image = read_image((images / (n + ".ppm")).string());
    s.mask = binarize(read_image((fs::path(root) / "masks" / (n + ".pgm")).string()));
    s.boundary = binarize(read_image((fs::path(root) / "boundaries" / (n + ".pgm")).string()));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dps
