#pragma once

// Binary tensor blocks ("ASPT"): magic, u32 rank, rank x u64 dims, then the
// f64 payload in row-major order, all little-endian.
//
// Containers (checkpoints and dataset files) are one line of JSON header
// followed by the ASPT blocks listed in header["sections"], in that order.

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "anyshift/tensor.hpp"

namespace anyshift {

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> sections;

  void add(std::string name, const Tensor& t) { sections.emplace_back(std::move(name), t); }
  // Throws InputError naming the section when absent.
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_archive(const std::string& path, const TensorArchive& archive);
TensorArchive load_archive(const std::string& path);
void write_archive(std::ostream& os, const TensorArchive& archive);
TensorArchive read_archive(std::istream& is);

}  // namespace anyshift
