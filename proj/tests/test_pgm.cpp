#include <catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "st/pgm.hpp"
#include "st/rng.hpp"

using namespace st;
namespace fs = std::filesystem;

namespace {
std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("pgm: binary mask roundtrip", "[pgm]") {
  Rng rng(51);
  Mask m(9, 13);
  for (auto& v : m.v) v = rng.below(2) ? 1 : 0;
  const std::string path = tmp_path("st_mask.pgm");
  write_pgm_mask(path, m);
  const Mask back = read_pgm_mask(path);
  REQUIRE(back.h == m.h);
  REQUIRE(back.w == m.w);
  REQUIRE(back.v == m.v);
  fs::remove(path);
}

TEST_CASE("pgm: mask file is maxval-1 P5", "[pgm]") {
  Mask m(2, 3);
  m.at(0, 1) = 1;
  const std::string path = tmp_path("st_mask_hdr.pgm");
  write_pgm_mask(path, m);
  std::ifstream f(path, std::ios::binary);
  std::string magic, dims1, dims2, maxval;
  f >> magic >> dims1 >> dims2 >> maxval;
  REQUIRE(magic == "P5");
  REQUIRE(dims1 == "3");
  REQUIRE(dims2 == "2");
  REQUIRE(maxval == "1");
  fs::remove(path);
}

TEST_CASE("pgm: probability map quantization is round(p*65535)", "[pgm]") {
  const int h = 3, w = 4;
  std::vector<double> probs = {0.0, 1.0, 0.5, 0.25, 0.75, 1e-6, 1.0 - 1e-6, 0.123456, 0.9, 0.1,
                               0.33333, 0.66667};
  const std::string path = tmp_path("st_prob.pgm");
  write_pgm_prob(path, h, w, probs);
  const PgmImage img = read_pgm(path);
  REQUIRE(img.h == h);
  REQUIRE(img.w == w);
  REQUIRE(img.maxval == 65535);
  for (std::size_t i = 0; i < probs.size(); ++i)
    REQUIRE(img.v[i] == static_cast<std::uint16_t>(probs[i] * 65535.0 + 0.5));
  fs::remove(path);
}

TEST_CASE("pgm: probability outside [0,1] is rejected", "[pgm]") {
  const std::string path = tmp_path("st_prob_bad.pgm");
  REQUIRE_THROWS_AS(write_pgm_prob(path, 1, 1, {1.5}), std::runtime_error);
  REQUIRE_THROWS_AS(write_pgm_prob(path, 1, 2, {0.5}), std::runtime_error);  // size mismatch
}

TEST_CASE("pgm: malformed headers are rejected", "[pgm]") {
  const std::string path = tmp_path("st_pgm_junk.pgm");
  {
    std::ofstream f(path, std::ios::binary);
    f << "P6\n2 2\n255\n";
  }
  REQUIRE_THROWS_AS(read_pgm(path), std::runtime_error);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "P5\n2 2\n255\nA";  // truncated pixel payload
  }
  REQUIRE_THROWS_AS(read_pgm(path), std::runtime_error);
  REQUIRE_THROWS_AS(read_pgm(tmp_path("st_pgm_missing.pgm")), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("pgm: non-binary file is rejected as a mask", "[pgm]") {
  const std::string path = tmp_path("st_pgm_gray.pgm");
  write_pgm_prob(path, 1, 2, {0.3, 0.9});
  REQUIRE_THROWS_AS(read_pgm_mask(path), std::runtime_error);
  fs::remove(path);
}
