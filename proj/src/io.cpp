#include "blockflow/io.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace blockflow {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) throw ValidationError(path.string() + ": not a number: '" + s + "'");
  return v;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ValidationError("csv: no column named '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
  t.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto row = split_line(line);
    if (row.size() != t.header.size()) {
      throw ValidationError(path.string() + ": row " + std::to_string(t.rows.size() + 1) + " has " +
                            std::to_string(row.size()) + " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

ExpressionMatrix read_matrix_csv(const std::filesystem::path& path, Stage stage) {
  CsvTable t = read_csv(path);
  if (t.header.size() < 2) throw ValidationError(path.string() + ": need a cell id column and at least one gene");
  std::vector<std::string> genes(t.header.begin() + 1, t.header.end());
  std::vector<std::string> cells;
  std::vector<double> values;
  values.reserve(t.rows.size() * genes.size());
  for (const auto& row : t.rows) {
    cells.push_back(row[0]);
    for (std::size_t j = 1; j < row.size(); ++j) values.push_back(parse_double(row[j], path));
  }
  return ExpressionMatrix(std::move(cells), std::move(genes), std::move(values), stage);
}

void write_matrix_csv(const std::filesystem::path& path, const ExpressionMatrix& m) {
  std::string out = "cell_id";
  for (const auto& g : m.gene_ids()) out += "," + g;
  out += "\n";
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    out += m.cell_ids()[c];
    for (double v : m.row(c)) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (pos_ + n > data_.size()) throw ValidationError("truncated binary payload");
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

ExpressionMatrix read_matrix_binary(const std::filesystem::path& path, Stage stage) {
  std::string bytes = read_file(path);
  ByteReader r(bytes);
  if (r.bytes(4) != std::string(kMatrixMagic, 4)) throw ValidationError(path.string() + ": bad matrix magic");
  std::uint32_t n = r.u32();
  std::uint32_t g = r.u32();
  std::vector<double> values(static_cast<std::size_t>(n) * g);
  for (double& v : values) v = r.f64();
  if (!r.done()) throw ValidationError(path.string() + ": trailing bytes after matrix payload");
  std::vector<std::string> cells(n), genes(g);
  for (std::uint32_t i = 0; i < n; ++i) cells[i] = "cell_" + std::to_string(i);
  for (std::uint32_t j = 0; j < g; ++j) genes[j] = "gene_" + std::to_string(j);
  return ExpressionMatrix(std::move(cells), std::move(genes), std::move(values), stage);
}

void write_matrix_binary(const std::filesystem::path& path, const ExpressionMatrix& m) {
  std::string out(kMatrixMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(m.n_cells()));
  put_u32(out, static_cast<std::uint32_t>(m.n_genes()));
  for (double v : m.values()) put_f64(out, v);
  write_file_atomic(path, out);
}

ExpressionMatrix read_matrix(const std::filesystem::path& path, Stage stage) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  char head[4] = {};
  in.read(head, 4);
  if (in.gcount() == 4 && std::memcmp(head, kMatrixMagic, 4) == 0) return read_matrix_binary(path, stage);
  return read_matrix_csv(path, stage);
}

void write_matrix(const std::filesystem::path& path, const ExpressionMatrix& m) {
  if (path.extension() == ".bfx") {
    write_matrix_binary(path, m);
  } else {
    write_matrix_csv(path, m);
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace blockflow
