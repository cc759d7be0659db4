#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "blockflow/preprocess.hpp"

namespace blockflow {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
std::string format_double(double v);

// Header row = "cell_id,<gene ids...>", first column = cell ids.
ExpressionMatrix read_matrix_csv(const std::filesystem::path& path, Stage stage = Stage::Raw);
void write_matrix_csv(const std::filesystem::path& path, const ExpressionMatrix& m);

// "BFX1", u32 N, u32 G, N*G little-endian f64, row-major. Ids are synthesized.
inline constexpr char kMatrixMagic[4] = {'B', 'F', 'X', '1'};
ExpressionMatrix read_matrix_binary(const std::filesystem::path& path, Stage stage = Stage::Raw);
void write_matrix_binary(const std::filesystem::path& path, const ExpressionMatrix& m);

// Dispatches on the leading magic bytes.
ExpressionMatrix read_matrix(const std::filesystem::path& path, Stage stage = Stage::Raw);
// Binary when the extension is .bfx, CSV otherwise.
void write_matrix(const std::filesystem::path& path, const ExpressionMatrix& m);

// Writes via a sibling temp file and renames into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// Little-endian primitive encoding.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : data_(bytes) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::size_t n);
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const;
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace blockflow
