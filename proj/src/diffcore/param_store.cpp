#include "spotkit/diffcore/param_store.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace spotkit::diff {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'O', 'T', 'K', 'I', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "SPOTKIT1 files are little-endian; add byte swapping for this target");

template <typename Real>
constexpr const char* dtype_name() {
  return sizeof(Real) == 4 ? "float32" : "float64";
}

}  // namespace

template <typename Real>
Tensor<Real>& ParamStore<Real>::add(const std::string& name, Tensor<Real> tensor, bool trainable) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate name '" + name + "'");
  tensor.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(tensor)});
  return entries_.back().tensor;
}

template <typename Real>
Tensor<Real>& ParamStore<Real>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no entry named '" + name + "'");
  return entries_[it->second].tensor;
}

template <typename Real>
const Tensor<Real>& ParamStore<Real>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no entry named '" + name + "'");
  return entries_[it->second].tensor;
}

template <typename Real>
void ParamStore<Real>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename Real>
std::size_t ParamStore<Real>::parameter_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!trainable_only || e.tensor.requires_grad()) n += e.tensor.size();
  return n;
}

template <typename Real>
void ParamStore<Real>::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "SPOTKIT1";
  header["version"] = 1;
  auto& list = header["tensors"];
  list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    const std::uint64_t nbytes = e.tensor.size() * sizeof(Real);
    list.push_back({{"name", e.name},
                    {"shape", e.tensor.shape()},
                    {"dtype", dtype_name<Real>()},
                    {"offset", offset},
                    {"nbytes", nbytes},
                    {"trainable", e.tensor.requires_grad()}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write parameter file " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = text.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries_) {
    out.write(reinterpret_cast<const char*>(e.tensor.data()),
              static_cast<std::streamsize>(e.tensor.size() * sizeof(Real)));
  }
  if (!out) throw std::runtime_error("short write to parameter file " + path.string());
}

namespace {

struct RawEntry {
  std::string name;
  Shape shape;
  bool f32 = true;
  bool trainable = true;
  std::vector<char> bytes;
};

std::vector<RawEntry> read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open parameter file " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + ": not a SPOTKIT1 parameter file");
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1u << 30)) throw std::runtime_error(path.string() + ": bad header length");
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  const auto header = nlohmann::json::parse(text);
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<RawEntry> out;
  for (const auto& t : header.at("tensors")) {
    RawEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    const auto dtype = t.at("dtype").get<std::string>();
    if (dtype != "float32" && dtype != "float64") {
      throw std::runtime_error(path.string() + ": unsupported dtype " + dtype);
    }
    e.f32 = dtype == "float32";
    e.trainable = t.value("trainable", true);
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (nbytes != numel(e.shape) * (e.f32 ? 4u : 8u) || offset + nbytes > blob.size()) {
      throw std::runtime_error(path.string() + ": truncated or inconsistent entry " + e.name);
    }
    e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                   blob.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
    out.push_back(std::move(e));
  }
  return out;
}

template <typename Real>
std::vector<Real> decode(const RawEntry& e) {
  const std::size_t n = numel(e.shape);
  std::vector<Real> v(n);
  if (e.f32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), e.bytes.data(), n * 4);
    std::copy(tmp.begin(), tmp.end(), v.begin());
  } else {
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), e.bytes.data(), n * 8);
    std::copy(tmp.begin(), tmp.end(), v.begin());
  }
  return v;
}

}  // namespace

template <typename Real>
ParamStore<Real> ParamStore<Real>::load(const std::filesystem::path& path) {
  ParamStore<Real> store;
  for (const auto& e : read_container(path)) {
    store.add(e.name, Tensor<Real>(e.shape, decode<Real>(e)), e.trainable);
  }
  return store;
}

template <typename Real>
void ParamStore<Real>::load_values(const std::filesystem::path& path) {
  auto raw = read_container(path);
  for (const auto& e : raw) {
    if (!contains(e.name)) throw std::runtime_error(path.string() + ": unexpected entry " + e.name);
    auto& t = at(e.name);
    if (t.shape() != e.shape) {
      throw std::runtime_error(path.string() + ": shape mismatch for " + e.name + ": file " +
                               to_string(e.shape) + ", model " + to_string(t.shape()));
    }
    auto v = decode<Real>(e);
    std::copy(v.begin(), v.end(), t.values().begin());
  }
  if (raw.size() != size()) {
    throw std::runtime_error(path.string() + ": holds " + std::to_string(raw.size()) +
                             " entries, expected " + std::to_string(size()));
  }
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace spotkit::diff
