#include "boltzlab/dataset.hpp"

#include <bit>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include <fmt/format.h>

namespace boltzlab {

namespace {

constexpr std::string_view kMagic = "boltzlab-dataset";
constexpr int kVersion = 1;

std::string expect_field(std::istream& in, std::string_view key) {
  std::string line;
  if (!std::getline(in, line)) {
    throw DatasetError(fmt::format("dataset: truncated header, expected '{}'", key));
  }
  const auto space = line.find(' ');
  if (space == std::string::npos || std::string_view(line).substr(0, space) != key) {
    throw DatasetError(fmt::format("dataset: expected '{}' in header, found '{}'", key, line));
  }
  return line.substr(space + 1);
}

long long parse_count(const std::string& s, std::string_view key) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE || v < 0) {
    throw DatasetError(fmt::format("dataset: bad value '{}' for {}", s, key));
  }
  return v;
}

void put_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (char& b : bytes) {
    b = static_cast<char>(bits & 0xffU);
    bits >>= 8;
  }
  out.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) {
    bits = (bits << 8) | bytes[i];
  }
  return std::bit_cast<double>(bits);
}

}  // namespace

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "text") {
    return DatasetFormat::kText;
  }
  if (name == "binary") {
    return DatasetFormat::kBinary;
  }
  throw std::invalid_argument(fmt::format("unknown dataset format '{}' (expected text or binary)", name));
}

void write_dataset(const Dataset& data, const std::filesystem::path& path, DatasetFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DatasetError(fmt::format("dataset: cannot open '{}' for writing", path.string()));
  }
  const bool binary = format == DatasetFormat::kBinary;
  out << kMagic << ' ' << kVersion << ' ' << (binary ? "binary" : "text") << '\n';
  out << "dim " << data.dim() << '\n';
  out << "count " << data.count() << '\n';
  out << "target " << data.target_id << '\n';
  out << "config_hash " << data.config_hash << '\n';
  out << "seed " << data.seed << '\n';
  out << "data\n";
  if (binary) {
    for (Index i = 0; i < data.count(); ++i) {
      for (Index j = 0; j < data.dim(); ++j) {
        put_le(out, data.x(i, j));
      }
    }
  } else {
    std::string row;
    for (Index i = 0; i < data.count(); ++i) {
      row.clear();
      for (Index j = 0; j < data.dim(); ++j) {
        if (j > 0) {
          row += ' ';
        }
        row += fmt::format("{:a}", data.x(i, j));
      }
      row += '\n';
      out << row;
    }
  }
  if (!out) {
    throw DatasetError(fmt::format("dataset: write to '{}' failed", path.string()));
  }
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DatasetError(fmt::format("dataset: cannot open '{}'", path.string()));
  }
  std::string line;
  std::getline(in, line);
  std::istringstream magic(line);
  std::string word;
  int version = 0;
  std::string kind;
  magic >> word >> version >> kind;
  if (word != kMagic) {
    throw DatasetError(fmt::format("dataset: '{}' is not a boltzlab dataset", path.string()));
  }
  if (version != kVersion) {
    throw DatasetError(fmt::format("dataset: version {} is not supported (this build reads {})", version, kVersion));
  }
  if (kind != "text" && kind != "binary") {
    throw DatasetError(fmt::format("dataset: unknown encoding '{}'", kind));
  }
  Dataset d;
  const long long dim = parse_count(expect_field(in, "dim"), "dim");
  const long long count = parse_count(expect_field(in, "count"), "count");
  d.target_id = expect_field(in, "target");
  d.config_hash = expect_field(in, "config_hash");
  d.seed = static_cast<std::uint64_t>(parse_count(expect_field(in, "seed"), "seed"));
  if (!std::getline(in, line) || line != "data") {
    throw DatasetError("dataset: missing 'data' marker");
  }
  d.x.resize(static_cast<Index>(count), static_cast<Index>(dim));
  if (kind == "binary") {
    std::vector<unsigned char> buf(static_cast<std::size_t>(dim) * 8);
    for (long long i = 0; i < count; ++i) {
      if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw DatasetError(fmt::format("dataset: truncated at row {} of {}", i, count));
      }
      for (long long j = 0; j < dim; ++j) {
        d.x(static_cast<Index>(i), static_cast<Index>(j)) = get_le(buf.data() + 8 * j);
      }
    }
  } else {
    for (long long i = 0; i < count; ++i) {
      if (!std::getline(in, line)) {
        throw DatasetError(fmt::format("dataset: truncated at row {} of {}", i, count));
      }
      const char* p = line.c_str();
      for (long long j = 0; j < dim; ++j) {
        char* end = nullptr;
        const double v = std::strtod(p, &end);
        if (end == p) {
          throw DatasetError(fmt::format("dataset: row {} has fewer than {} values", i, dim));
        }
        d.x(static_cast<Index>(i), static_cast<Index>(j)) = v;
        p = end;
      }
    }
  }
  return d;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace boltzlab
