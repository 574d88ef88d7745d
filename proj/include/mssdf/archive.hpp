#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mssdf/autodiff.hpp"
#include "mssdf/error.hpp"

namespace mssdf {

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// Flat tensor archive:
///   8 bytes   magic "MSSDFTA1"
///   8 bytes   little-endian manifest length L
///   L bytes   JSON manifest {"version":1,"tensors":[{name, shape:[r,c], dtype:"f64", offset}]}
///   payload   row-major f64 data, offsets relative to payload start
/// Files are written to a temporary sibling and renamed into place.
inline constexpr char kArchiveMagic[8] = {'M', 'S', 'S', 'D', 'F', 'T', 'A', '1'};
inline constexpr int kArchiveVersion = 1;

inline void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  nlohmann::json manifest;
  manifest["version"] = kArchiveVersion;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name},
                                   {"shape", {t.value.rows(), t.value.cols()}},
                                   {"dtype", "f64"},
                                   {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.value.size()) * sizeof(double);
  }
  const std::string header = manifest.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write archive '" + tmp.string() + "'");
    out.write(kArchiveMagic, sizeof(kArchiveMagic));
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& t : tensors)
      out.write(reinterpret_cast<const char*>(t.value.data()),
                static_cast<std::streamsize>(static_cast<std::size_t>(t.value.size()) * sizeof(double)));
    out.flush();
    if (!out) throw RuntimeError("failed writing archive '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw RuntimeError("cannot move archive into place at '" + path.string() + "': " + ec.message());
}

inline std::vector<NamedTensor> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open archive '" + path.string() + "'");
  const auto file_size = static_cast<std::uint64_t>(std::filesystem::file_size(path));
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0)
    throw RuntimeError("'" + path.string() + "' is not a tensor archive");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || 16 + len > file_size)
    throw RuntimeError("archive '" + path.string() + "' is truncated (manifest)");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const std::exception& e) {
    throw RuntimeError("archive '" + path.string() + "' has a corrupt manifest: " + e.what());
  }
  if (manifest.value("version", -1) != kArchiveVersion)
    throw RuntimeError("archive '" + path.string() + "' has unsupported version " +
                       manifest.value("version", nlohmann::json(-1)).dump());

  const std::uint64_t payload = 16 + len;
  std::vector<NamedTensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("dtype") != "f64") throw RuntimeError("archive tensor has unsupported dtype");
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto bytes = static_cast<std::uint64_t>(rows * cols) * sizeof(double);
    if (payload + offset + bytes > file_size)
      throw RuntimeError("archive '" + path.string() + "' is truncated at tensor '" +
                         entry.at("name").get<std::string>() + "'");
    NamedTensor t{entry.at("name").get<std::string>(), Matrix(rows, cols)};
    in.seekg(static_cast<std::streamoff>(payload + offset));
    in.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw RuntimeError("archive '" + path.string() + "' is truncated");
    out.push_back(std::move(t));
  }
  return out;
}

inline void append_store(std::vector<NamedTensor>& out, const ParameterStore& ps, const std::string& prefix) {
  for (const auto& p : ps) out.push_back({prefix + p.name, p.value});
}

/// Copies archived tensors named `prefix + name` into `ps`, checking that every
/// parameter is present with the expected shape. Fails naming the first mismatch.
inline void load_store(ParameterStore& ps, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t);
  for (auto& p : ps) {
    const std::string key = prefix + p.name;
    auto it = by_name.find(key);
    if (it == by_name.end()) throw RuntimeError("checkpoint is missing tensor '" + key + "'");
    const Matrix& v = it->second->value;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw RuntimeError("tensor '" + key + "' has shape [" + std::to_string(v.rows()) + "," +
                         std::to_string(v.cols()) + "], expected [" + std::to_string(p.value.rows()) + "," +
                         std::to_string(p.value.cols()) + "]");
  }
  for (auto& p : ps) p.value = by_name.at(prefix + p.name)->value;
}

}  // namespace mssdf
