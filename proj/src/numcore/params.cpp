#include "xldg/numcore/params.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace xldg::num {

std::size_t ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  if (name.find_first_of(" \t\n") != std::string::npos) {
    throw std::invalid_argument("parameter names must not contain whitespace: " + name);
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t ParamSet::index(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw std::out_of_range("no parameter named " + std::string(name));
}

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

namespace {

static_assert(sizeof(double) == 8);

void put_le(std::string& out, double x) {
  auto bits = std::bit_cast<std::uint64_t>(x);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

std::string manifest_text(const ParamSet& params) {
  std::ostringstream os;
  os << "xldg-params 1\n" << params.size() << '\n';
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params[i];
    os << params.name(i) << ' ' << t.rank();
    for (auto d : t.shape()) os << ' ' << d;
    os << ' ' << offset << ' ' << 8 * t.size() << '\n';
    offset += 8 * t.size();
  }
  return os.str();
}

std::string blob_bytes(const ParamSet& params) {
  std::string blob;
  blob.reserve(8 * params.element_count());
  for (const auto& t : params.values()) {
    for (double x : t.data()) put_le(blob, x);
  }
  return blob;
}

}  // namespace

void save_params(const ParamSet& params, const std::filesystem::path& stem) {
  {
    std::ofstream m(with_suffix(stem, ".manifest"), std::ios::binary);
    if (!m) throw std::runtime_error("cannot write " + with_suffix(stem, ".manifest").string());
    m << manifest_text(params);
  }
  std::ofstream b(with_suffix(stem, ".bin"), std::ios::binary);
  if (!b) throw std::runtime_error("cannot write " + with_suffix(stem, ".bin").string());
  const std::string blob = blob_bytes(params);
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

ParamSet load_params(const std::filesystem::path& stem) {
  const auto mpath = with_suffix(stem, ".manifest");
  std::ifstream m(mpath, std::ios::binary);
  if (!m) throw std::runtime_error("cannot open " + mpath.string());
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(m >> magic >> version >> count) || magic != "xldg-params" || version != 1) {
    throw std::runtime_error(mpath.string() + ": not an xldg-params v1 manifest");
  }
  const auto bpath = with_suffix(stem, ".bin");
  std::ifstream b(bpath, std::ios::binary);
  if (!b) throw std::runtime_error("cannot open " + bpath.string());
  std::string blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());

  ParamSet params;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    std::size_t rank = 0, offset = 0, bytes = 0;
    if (!(m >> name >> rank)) throw std::runtime_error(mpath.string() + ": truncated entry");
    Shape shape(rank);
    for (auto& d : shape) m >> d;
    if (!(m >> offset >> bytes) || bytes != 8 * shape_size(shape) ||
        offset + bytes > blob.size()) {
      throw std::runtime_error(mpath.string() + ": bad extent for " + name);
    }
    std::vector<double> data(shape_size(shape));
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t j = 0; j < data.size(); ++j) data[j] = get_le(p + 8 * j);
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

std::uint64_t params_hash(const ParamSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  mix(manifest_text(params));
  mix(blob_bytes(params));
  return h;
}

}  // namespace xldg::num
