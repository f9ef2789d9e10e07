#include "genci/io.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace genci::io {

namespace {

constexpr char kVecMagic[4] = {'G', 'N', 'C', 'E'};
constexpr char kMatMagic[4] = {'G', 'N', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode) {
  std::ofstream out(path, mode);
  if (!out) fail(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode) {
  std::ifstream in(path, mode);
  if (!in) fail(path, "cannot open");
  return in;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) fail(path, "truncated file");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& path) {
  std::uint32_t n = get_u32(in, path);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) fail(path, "truncated string");
  return s;
}

void put_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 8));
}

void get_doubles(std::istream& in, double* p, std::size_t n, const std::string& path) {
  if (!in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 8))) {
    fail(path, "truncated payload");
  }
}

}  // namespace

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_vectors_text(const std::string& path, const NamedVectors& v) {
  auto out = open_out(path, std::ios::out);
  for (const auto& [name, vec] : v.rows) {
    out << name;
    for (Index i = 0; i < vec.size(); ++i) out << ' ' << format_real(vec(i));
    out << '\n';
  }
  if (!out) fail(path, "write failed");
}

void write_vectors_binary(const std::string& path, const NamedVectors& v) {
  auto out = open_out(path, std::ios::binary);
  out.write(kVecMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(v.rows.size()));
  put_u32(out, static_cast<std::uint32_t>(v.dim));
  for (const auto& [name, vec] : v.rows) {
    if (vec.size() != v.dim) fail(path, "row '" + name + "' has wrong dimension");
    put_string(out, name);
    put_doubles(out, vec.data(), static_cast<std::size_t>(vec.size()));
  }
  if (!out) fail(path, "write failed");
}

namespace {

NamedVectors read_vectors_binary(const std::string& path) {
  auto in = open_in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  std::uint32_t version = get_u32(in, path);
  if (version != kVersion) fail(path, "unsupported version " + std::to_string(version));
  std::uint32_t count = get_u32(in, path);
  std::uint32_t dim = get_u32(in, path);
  NamedVectors v;
  v.dim = static_cast<Index>(dim);
  v.rows.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in, path);
    Vec vec(v.dim);
    get_doubles(in, vec.data(), dim, path);
    v.rows.emplace_back(std::move(name), std::move(vec));
  }
  return v;
}

NamedVectors read_vectors_text(const std::string& path) {
  auto in = open_in(path, std::ios::in);
  NamedVectors v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name;
    ss >> name;
    std::vector<double> vals;
    double x;
    while (ss >> x) vals.push_back(x);
    if (name.empty() || vals.empty()) {
      fail(path, "malformed record at line " + std::to_string(lineno));
    }
    if (v.dim == 0) v.dim = static_cast<Index>(vals.size());
    if (static_cast<Index>(vals.size()) != v.dim) {
      fail(path, "inconsistent dimension at line " + std::to_string(lineno));
    }
    Vec vec(v.dim);
    for (Index i = 0; i < v.dim; ++i) vec(i) = vals[static_cast<std::size_t>(i)];
    v.rows.emplace_back(std::move(name), std::move(vec));
  }
  return v;
}

}  // namespace

NamedVectors read_vectors(const std::string& path) {
  {
    auto in = open_in(path, std::ios::binary);
    char magic[4] = {0, 0, 0, 0};
    in.read(magic, 4);
    if (in.gcount() == 4 && std::memcmp(magic, kVecMagic, 4) == 0) {
      return read_vectors_binary(path);
    }
  }
  return read_vectors_text(path);
}

void write_matrices(const std::string& path, const NamedMatrices& m) {
  auto out = open_out(path, std::ios::binary);
  out.write(kMatMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.tensors.size()));
  put_u32(out, 0);  // reserved
  for (const auto& [name, mat] : m.tensors) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(mat.rows()));
    put_u32(out, static_cast<std::uint32_t>(mat.cols()));
    put_doubles(out, mat.data(), static_cast<std::size_t>(mat.size()));
  }
  if (!out) fail(path, "write failed");
}

NamedMatrices read_matrices(const std::string& path) {
  auto in = open_in(path, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMatMagic, 4) != 0) {
    fail(path, "not a checkpoint file");
  }
  std::uint32_t version = get_u32(in, path);
  if (version != kVersion) fail(path, "unsupported version " + std::to_string(version));
  std::uint32_t count = get_u32(in, path);
  get_u32(in, path);  // reserved
  NamedMatrices m;
  m.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in, path);
    std::uint32_t rows = get_u32(in, path);
    std::uint32_t cols = get_u32(in, path);
    Mat mat(static_cast<Index>(rows), static_cast<Index>(cols));
    get_doubles(in, mat.data(), static_cast<std::size_t>(mat.size()), path);
    m.tensors.emplace_back(std::move(name), std::move(mat));
  }
  return m;
}

std::string read_text_file(const std::string& path) {
  auto in = open_in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  auto out = open_out(path, std::ios::binary);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) fail(path, "write failed");
}

}  // namespace genci::io
