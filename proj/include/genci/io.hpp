#pragma once

#include "genci/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace genci::io {

// Round-trippable text form of a double.
std::string format_real(double v);

// Named dense vectors, e.g. item embeddings or exported intents. Two
// interchangeable on-disk forms: a text file with one record per line
// (name then whitespace-separated floats) and a binary container with a
// 16-byte header (magic, version, count, dim) followed by records of
// name length, name bytes and dim doubles.
struct NamedVectors {
  Index dim = 0;
  std::vector<std::pair<std::string, Vec>> rows;
};

void write_vectors_text(const std::string& path, const NamedVectors& v);
void write_vectors_binary(const std::string& path, const NamedVectors& v);
// Reads either form; binary is detected by its magic.
NamedVectors read_vectors(const std::string& path);

// Checkpoint container for named matrices, same spirit as the vector
// container but with row and column counts per tensor.
struct NamedMatrices {
  std::vector<std::pair<std::string, Mat>> tensors;
};

void write_matrices(const std::string& path, const NamedMatrices& m);
NamedMatrices read_matrices(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace genci::io
