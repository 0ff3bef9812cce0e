#include "anyshift/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "anyshift/errors.hpp"

namespace anyshift {

namespace {

constexpr char kMagic[4] = {'A', 'S', 'P', 'T'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw InputError("tensor block: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  const Matrix& v = t.value();
  for (Index i = 0; i < v.size(); ++i) put<double>(os, v.data()[i]);
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw InputError("tensor block: bad magic");
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw InputError("tensor block: implausible rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(get<std::uint64_t>(is)));
  const auto n = shape_numel(shape);
  Matrix flat(1, n);
  for (std::int64_t i = 0; i < n; ++i) flat(0, i) = get<double>(is);
  return Tensor(std::move(shape), std::move(flat));
}

const Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : sections) {
    if (n == name) return t;
  }
  throw InputError("archive: missing section '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.first == name) return true;
  }
  return false;
}

void write_archive(std::ostream& os, const TensorArchive& archive) {
  nlohmann::json header = archive.header;
  header["sections"] = nlohmann::json::array();
  for (const auto& s : archive.sections) header["sections"].push_back(s.first);
  os << header.dump() << '\n';
  for (const auto& s : archive.sections) write_tensor(os, s.second);
}

TensorArchive read_archive(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("archive: missing header line");
  TensorArchive a;
  try {
    a.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("archive: malformed header: ") + e.what());
  }
  if (!a.header.contains("sections") || !a.header["sections"].is_array()) {
    throw InputError("archive: header lacks a sections list");
  }
  for (const auto& name : a.header["sections"]) a.sections.emplace_back(name.get<std::string>(), read_tensor(is));
  return a;
}

void save_archive(const std::string& path, const TensorArchive& archive) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open '" + path + "' for writing");
  write_archive(os, archive);
  if (!os) throw InputError("write failed for '" + path + "'");
}

TensorArchive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open '" + path + "'");
  return read_archive(is);
}

}  // namespace anyshift
