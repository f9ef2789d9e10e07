#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "genci/io.hpp"

#include <filesystem>
#include <fstream>

using namespace genci;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "genci_test_io") {
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

io::NamedVectors sample_vectors() {
  io::NamedVectors v;
  v.dim = 3;
  Vec a(3), b(3);
  a << 1.0, -2.5, 3.14159265358979312;
  b << 1e-17, 0.0, -7.25;
  v.rows.emplace_back("item_a", a);
  v.rows.emplace_back("item_b", b);
  return v;
}

}  // namespace

TEST_CASE("format_real round trips doubles") {
  for (double x : {0.0, -1.5, 3.141592653589793, 1e-300, -2.2250738585072014e-308}) {
    CHECK(std::stod(io::format_real(x)) == x);
  }
}

TEST_CASE("vector text round trip") {
  TempDir tmp;
  auto path = tmp.file("vecs.txt");
  auto v = sample_vectors();
  io::write_vectors_text(path, v);
  auto r = io::read_vectors(path);
  REQUIRE(r.rows.size() == 2);
  CHECK(r.dim == 3);
  CHECK(r.rows[0].first == "item_a");
  CHECK(r.rows[1].first == "item_b");
  CHECK((r.rows[0].second - v.rows[0].second).norm() == 0.0);
  CHECK((r.rows[1].second - v.rows[1].second).norm() == 0.0);
}

TEST_CASE("vector binary round trip via sniffing reader") {
  TempDir tmp;
  auto path = tmp.file("vecs.bin");
  auto v = sample_vectors();
  io::write_vectors_binary(path, v);
  auto r = io::read_vectors(path);
  REQUIRE(r.rows.size() == 2);
  CHECK(r.dim == 3);
  CHECK((r.rows[0].second - v.rows[0].second).norm() == 0.0);
  CHECK((r.rows[1].second - v.rows[1].second).norm() == 0.0);
}

TEST_CASE("binary header is 16 bytes") {
  TempDir tmp;
  auto path = tmp.file("hdr.bin");
  io::NamedVectors v;
  v.dim = 2;
  Vec a(2);
  a << 1.0, 2.0;
  v.rows.emplace_back("x", a);
  io::write_vectors_binary(path, v);
  // magic + version + count + dim, then one record: len=1, "x", 2 doubles
  CHECK(fs::file_size(path) == 16 + 4 + 1 + 16);
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "GNCE");
}

TEST_CASE("matrix container round trip") {
  TempDir tmp;
  auto path = tmp.file("ckpt.bin");
  io::NamedMatrices m;
  Mat a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  m.tensors.emplace_back("enc.w", a);
  m.tensors.emplace_back("enc.b", Mat::Zero(1, 3));
  io::write_matrices(path, m);
  auto r = io::read_matrices(path);
  REQUIRE(r.tensors.size() == 2);
  CHECK(r.tensors[0].first == "enc.w");
  CHECK((r.tensors[0].second - a).norm() == 0.0);
  CHECK(r.tensors[1].second.rows() == 1);
  CHECK(r.tensors[1].second.cols() == 3);
}

TEST_CASE("inconsistent text dimensions are rejected") {
  TempDir tmp;
  auto path = tmp.file("bad.txt");
  io::write_text_file(path, "a 1 2 3\nb 1 2\n");
  CHECK_THROWS_AS(io::read_vectors(path), std::runtime_error);
}

TEST_CASE("reading a checkpoint from a non checkpoint file fails") {
  TempDir tmp;
  auto path = tmp.file("not_ckpt.txt");
  io::write_text_file(path, "plain text\n");
  CHECK_THROWS_AS(io::read_matrices(path), std::runtime_error);
}

TEST_CASE("missing files raise") {
  CHECK_THROWS_AS(io::read_vectors("/nonexistent/genci"), std::runtime_error);
  CHECK_THROWS_AS(io::read_text_file("/nonexistent/genci"), std::runtime_error);
}
