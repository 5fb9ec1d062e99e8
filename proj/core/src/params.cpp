#include "cdet/params.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>

#include "cdet/error.hpp"

namespace cdet {
namespace {

Shape storage_shape(const std::vector<int>& dims) {
  if (dims.empty()) {
    throw std::invalid_argument("Parameter: rank 0 is not supported");
  }
  if (dims.size() == 1) {
    return Shape{1, 1, dims[0]};
  }
  const int tail = std::accumulate(dims.begin() + 2, dims.end(), 1, std::multiplies<>());
  return Shape{dims[0], dims[1], tail};
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw IoError("checkpoint: truncated while reading " + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void Parameter::zero_grad() { grad.fill(0.0); }

Parameter& ParameterStore::add(const std::string& name, std::vector<int> dims, ParamRole role,
                               int fan_in, int fan_out, double init_value) {
  if (params_.count(name) != 0) {
    throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
  }
  const Shape shape = storage_shape(dims);
  Parameter p;
  p.dims = std::move(dims);
  p.role = role;
  p.fan_in = fan_in;
  p.fan_out = fan_out;
  p.init_value = init_value;
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  p.momentum = Tensor(shape);
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
  }
  return it->second;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
  }
  return it->second;
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) {
    n += p.value.size();
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) {
    p.zero_grad();
  }
}

void quantize_to_float(Tensor& t) {
  for (double& v : t.values()) {
    v = static_cast<double>(static_cast<float>(v));
  }
}

namespace {

// Per-parameter stream, so a layer's draw does not depend on which other
// layers the network has.
std::uint64_t param_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const char c : name) {
    h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (h | 1ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void init(ParameterStore& store, InitScheme scheme, std::uint64_t seed) {
  for (auto& [name, p] : store) {
    std::mt19937_64 rng(param_seed(seed, name));
    p.momentum.fill(0.0);
    p.grad.fill(0.0);
    switch (p.role) {
      case ParamRole::kBias:
        p.value.fill(0.0);
        break;
      case ParamRole::kScale:
        p.value.fill(p.init_value);
        break;
      case ParamRole::kBackboneWeight: {
        const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : p.value.values()) {
          v = dist(rng);
        }
        break;
      }
      case ParamRole::kWeight:
        if (scheme == InitScheme::kXavier) {
          const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
          std::uniform_real_distribution<double> dist(-bound, bound);
          for (double& v : p.value.values()) {
            v = dist(rng);
          }
        } else {
          std::normal_distribution<double> dist(0.0, 0.01);
          for (double& v : p.value.values()) {
            v = dist(rng);
          }
        }
        break;
    }
    quantize_to_float(p.value);
  }
}

void sgd_step(ParameterStore& store, double lr, double momentum, double weight_decay) {
  for (auto& [_, p] : store) {
    const std::size_t n = p.value.size();
    double* value = p.value.data();
    double* grad = p.grad.data();
    double* mom = p.momentum.data();
    for (std::size_t i = 0; i < n; ++i) {
      mom[i] = momentum * mom[i] + grad[i] + weight_decay * value[i];
      value[i] = static_cast<double>(static_cast<float>(value[i] - lr * mom[i]));
      grad[i] = 0.0;
    }
  }
}

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("checkpoint: cannot open '" + path.string() + "' for writing");
  }
  os.write("CDET", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    const std::size_t expected = std::accumulate(e.dims.begin(), e.dims.end(), std::size_t{1},
                                                 std::multiplies<>());
    if (expected != e.values.size()) {
      throw std::invalid_argument("checkpoint: entry '" + e.name + "' dims/values mismatch");
    }
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.dims.size()));
    for (const auto d : e.dims) {
      put_u32(os, d);
    }
    for (const float f : e.values) {
      put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
  }
  if (!os) {
    throw IoError("checkpoint: write failed for '" + path.string() + "'");
  }
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("checkpoint: cannot open '" + path.string() + "'");
  }
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "CDET", 4) != 0) {
    throw IoError("checkpoint: bad magic in '" + path.string() + "'");
  }
  const std::uint32_t version = get_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(is, "entry count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t len = get_u32(is, "name length");
    if (len > (1u << 16)) {
      throw IoError("checkpoint: implausible name length");
    }
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) {
      throw IoError("checkpoint: truncated name");
    }
    const std::uint32_t rank = get_u32(is, "rank");
    if (rank > 8) {
      throw IoError("checkpoint: implausible rank for '" + e.name + "'");
    }
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.dims.push_back(get_u32(is, "dims"));
      total *= e.dims.back();
    }
    if (total > (1u << 28)) {
      throw IoError("checkpoint: implausible size for '" + e.name + "'");
    }
    e.values.resize(total);
    for (float& f : e.values) {
      f = std::bit_cast<float>(get_u32(is, "values of '" + e.name + "'"));
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<CheckpointEntry> to_entries(const ParameterStore& store) {
  std::vector<CheckpointEntry> out;
  for (const auto& [name, p] : store) {
    CheckpointEntry e;
    e.name = name;
    for (const int d : p.dims) {
      e.dims.push_back(static_cast<std::uint32_t>(d));
    }
    e.values.reserve(p.value.size());
    for (const double v : p.value.values()) {
      e.values.push_back(static_cast<float>(v));
    }
    out.push_back(std::move(e));
  }
  return out;
}

void load_entries(ParameterStore& store, const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    by_name[e.name] = &e;
  }
  for (auto& [name, p] : store) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ConfigError("checkpoint: missing parameter '" + name + "'");
    }
    const CheckpointEntry& e = *it->second;
    if (e.dims.size() != p.dims.size() ||
        !std::equal(p.dims.begin(), p.dims.end(), e.dims.begin(),
                    [](int a, std::uint32_t b) { return static_cast<std::uint32_t>(a) == b; })) {
      throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      p.value[i] = static_cast<double>(e.values[i]);
    }
    p.momentum.fill(0.0);
    p.grad.fill(0.0);
  }
}

}  // namespace cdet
