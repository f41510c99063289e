#include "actflow/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "actflow/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive layout assumes a little-endian host");

namespace actflow {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t get_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t get_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void Archive::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : header) {
    if (k == key) {
      v = value;
      return;
    }
  }
  header.emplace_back(key, value);
}

const std::string& Archive::at(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  throw std::runtime_error("archive header: missing key '" + key + "'");
}

bool Archive::has(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return true;
  return false;
}

const Tensor& Archive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::runtime_error("archive: missing tensor '" + name + "'");
}

bool Archive::has_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void Archive::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("archive: cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);

  std::string head;
  for (const auto& [k, v] : header) head += k + "=" + v + "\n";
  put_u64(out, head.size());
  out.write(head.data(), static_cast<std::streamsize>(head.size()));

  put_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, static_cast<std::uint64_t>(t.shape().size()));
    for (int d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    const auto bytes = static_cast<std::size_t>(t.size()) * sizeof(double);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(bytes));
    put_u64(out, fnv1a(t.data(), bytes));
  }
  if (!out) throw std::runtime_error("archive: write to '" + path + "' failed");
}

Archive Archive::read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("archive: '" + path + "' has a bad magic number");
  const std::uint32_t version = get_u32(in);
  if (version != kVersion)
    throw std::runtime_error("archive: '" + path + "' has unsupported version " +
                             std::to_string(version));

  Archive a;
  const std::uint64_t head_len = get_u64(in);
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  std::size_t pos = 0;
  while (pos < head.size()) {
    const std::size_t eol = head.find('\n', pos);
    const std::string line = head.substr(pos, eol - pos);
    pos = eol == std::string::npos ? head.size() : eol + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("archive: malformed header line '" + line + "'");
    a.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }

  const std::uint64_t n_tensors = get_u64(in);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    const std::uint64_t name_len = get_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = get_u64(in);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(get_u64(in)));
    Tensor t = Tensor::zeros(shape);
    const auto bytes = static_cast<std::size_t>(t.size()) * sizeof(double);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
    const std::uint64_t want = get_u64(in);
    if (!in)
      throw std::runtime_error("archive: truncated while reading tensor '" + name + "'");
    if (fnv1a(t.data(), bytes) != want)
      throw std::runtime_error("archive: checksum mismatch on tensor '" + name + "'");
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace actflow
