#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dps/image_io.hpp"
#include "dps/synth.hpp"
#include "test_util.hpp"

using namespace dps;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double mask_fraction(const Sample& s) {
  double c = 0;
  for (auto v : s.mask.values()) c += v;
  return c / static_cast<double>(s.mask.numel());
}

}  // namespace

TEST_CASE("generate_sample: identical seed gives bit-identical samples") {
  Sample a = generate_sample(1234, 64, 64, 0.5);
  Sample b = generate_sample(1234, 64, 64, 0.5);
  CHECK(std::memcmp(a.image.data(), b.image.data(), sizeof(real) * 3 * 64 * 64) == 0);
  CHECK(std::memcmp(a.mask.data(), b.mask.data(), sizeof(real) * 64 * 64) == 0);
  CHECK(std::memcmp(a.boundary.data(), b.boundary.data(), sizeof(real) * 64 * 64) == 0);
  Sample c = generate_sample(1235, 64, 64, 0.5);
  CHECK(std::memcmp(a.mask.data(), c.mask.data(), sizeof(real) * 64 * 64) != 0);
}

TEST_CASE("generate_sample rejects bad sizes and difficulties") {
  CHECK_THROWS_AS(generate_sample(1, 60, 64, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(generate_sample(1, 64, 64, 1.5), std::invalid_argument);
}

TEST_CASE("mask fraction stays within [0.01, 0.60] across 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Sample s = generate_sample(seed, 64, 64, 0.5);
    const double f = mask_fraction(s);
    CHECK(f >= 0.01);
    CHECK(f <= 0.60);
  }
}

TEST_CASE("difficulty 0 keeps foreground and background colors far apart") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Sample s = generate_sample(seed, 64, 64, 0.0);
    double fg[3] = {0, 0, 0}, bg[3] = {0, 0, 0};
    double nfg = 0, nbg = 0;
    const std::int64_t n = 64 * 64;
    for (std::int64_t i = 0; i < n; ++i) {
      const bool m = s.mask.values()[static_cast<std::size_t>(i)] > 0.5;
      for (int c = 0; c < 3; ++c) {
        const double v = s.image.values()[static_cast<std::size_t>(c * n + i)];
        if (m)
          fg[c] += v;
        else
          bg[c] += v;
      }
      (m ? nfg : nbg) += 1;
    }
    double dist2 = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = fg[c] / nfg - bg[c] / nbg;
      dist2 += d * d;
    }
    CHECK(std::sqrt(dist2) > 0.3);
  }
}

TEST_CASE("difficulty 1 makes the foreground nearly indistinguishable") {
  Sample easy = generate_sample(7, 64, 64, 0.0);
  Sample hard = generate_sample(7, 64, 64, 1.0);
  // same mask, same background; the hard foreground collapses onto the
  // background texture except for the boundary band
  CHECK(std::memcmp(easy.mask.data(), hard.mask.data(), sizeof(real) * 64 * 64) == 0);
  const std::int64_t n = 64 * 64;
  // mean fg/bg color separation collapses at difficulty 1
  double fg[3] = {0, 0, 0}, bg[3] = {0, 0, 0};
  double nfg = 0, nbg = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const bool m = hard.mask.values()[static_cast<std::size_t>(i)] > 0.5;
    for (int c = 0; c < 3; ++c) {
      const double v = hard.image.values()[static_cast<std::size_t>(c * n + i)];
      if (m)
        fg[c] += v;
      else
        bg[c] += v;
    }
    (m ? nfg : nbg) += 1;
  }
  double dist2 = 0;
  for (int c = 0; c < 3; ++c) {
    const double d = fg[c] / nfg - bg[c] / nbg;
    dist2 += d * d;
  }
  CHECK(std::sqrt(dist2) < 0.1);
}

TEST_CASE("boundary_from_mask: basics") {
  Tensor zero = Tensor::zeros({1, 8, 8});
  Tensor b0 = boundary_from_mask(zero);
  for (auto v : b0.values()) CHECK(v == 0.0);

  // 4x4 solid square inside a larger image -> 12 boundary pixels
  Tensor m = Tensor::zeros({1, 10, 10});
  for (int y = 3; y < 7; ++y)
    for (int x = 3; x < 7; ++x) m.values()[static_cast<std::size_t>(y * 10 + x)] = 1;
  Tensor b = boundary_from_mask(m);
  double cnt = 0;
  for (auto v : b.values()) cnt += v;
  CHECK(cnt == 12.0);
  // interior of the square is not boundary
  CHECK(b.values()[static_cast<std::size_t>(4 * 10 + 4)] == 0.0);
}

TEST_CASE("boundary is always a subset of the mask") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Sample s = generate_sample(seed, 64, 64, 0.5);
    for (std::size_t i = 0; i < s.mask.values().size(); ++i)
      if (s.boundary.values()[i] > 0.5) CHECK(s.mask.values()[i] == 1.0);
  }
}

TEST_CASE("hflip: involution, mask count preserved, commutes with boundary") {
  Sample s = generate_sample(42, 64, 64, 0.5);
  Sample f = hflip(s);
  Sample ff = hflip(f);
  CHECK(std::memcmp(s.image.data(), ff.image.data(), sizeof(real) * 3 * 64 * 64) == 0);
  CHECK(std::memcmp(s.mask.data(), ff.mask.data(), sizeof(real) * 64 * 64) == 0);
  double c0 = 0, c1 = 0;
  for (auto v : s.mask.values()) c0 += v;
  for (auto v : f.mask.values()) c1 += v;
  CHECK(c0 == c1);
  Tensor lhs = boundary_from_mask(hflip_tensor(s.mask));
  Tensor rhs = hflip_tensor(boundary_from_mask(s.mask));
  CHECK(max_abs_diff(lhs, rhs) == 0.0);
}

TEST_CASE("pgm/ppm round trip is bit-exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dps_io_test";
  fs::create_directories(dir);
  CounterRng rng(3);
  // random 8-bit content
  Tensor img = Tensor::zeros({3, 12, 9});
  for (auto& v : img.values())
    v = static_cast<real>(static_cast<double>(rng.next_below(256)) / 255.0);
  const std::string p1 = (dir / "a.ppm").string();
  write_ppm(p1, img);
  Tensor back = read_image(p1);
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(img, back) == 0.0);
  const std::string p2 = (dir / "b.ppm").string();
  write_ppm(p2, back);
  CHECK(read_file(p1) == read_file(p2));

  Tensor gray = Tensor::zeros({1, 7, 5});
  for (auto& v : gray.values())
    v = static_cast<real>(static_cast<double>(rng.next_below(256)) / 255.0);
  const std::string p3 = (dir / "a.pgm").string();
  write_pgm(p3, gray);
  Tensor gback = read_image(p3);
  CHECK(max_abs_diff(gray, gback) == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("read_image reports failures with the path") {
  try {
    read_image("/nonexistent/file.ppm");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/file.ppm") != std::string::npos);
  }
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "dps_io_test2";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "bad.ppm", std::ios::binary);
    f << "P3\n2 2\n255\n";  // ASCII variant is unsupported
  }
  CHECK_THROWS_AS(read_image((dir / "bad.ppm").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("dataset write/read round trip and regeneration determinism") {
  namespace fs = std::filesystem;
  const fs::path d1 = fs::temp_directory_path() / "dps_ds1";
  const fs::path d2 = fs::temp_directory_path() / "dps_ds2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  auto ds = generate_dataset(99, 3, 64, 64, 0.4);
  write_dataset(d1.string(), ds);
  write_dataset(d2.string(), generate_dataset(99, 3, 64, 64, 0.4));
  for (int i = 0; i < 3; ++i) {
    const std::string n = sample_name(i);
    CHECK(read_file((d1 / "images" / (n + ".ppm")).string()) ==
          read_file((d2 / "images" / (n + ".ppm")).string()));
    CHECK(read_file((d1 / "masks" / (n + ".pgm")).string()) ==
          read_file((d2 / "masks" / (n + ".pgm")).string()));
    CHECK(read_file((d1 / "boundaries" / (n + ".pgm")).string()) ==
          read_file((d2 / "boundaries" / (n + ".pgm")).string()));
  }
  auto loaded = read_dataset(d1.string());
  CHECK(loaded.size() == 3);
  // masks are binary and survive the 8-bit round trip exactly
  for (int i = 0; i < 3; ++i) {
    CHECK(max_abs_diff(loaded[static_cast<std::size_t>(i)].mask, ds[static_cast<std::size_t>(i)].mask) == 0.0);
    CHECK(max_abs_diff(loaded[static_cast<std::size_t>(i)].boundary,
                       ds[static_cast<std::size_t>(i)].boundary) == 0.0);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}
