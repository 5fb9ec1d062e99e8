#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdet/tensor.hpp"

namespace cdet {

/// kBackboneWeight marks the feature extractor, which has no pretrained
/// weights here and is always He-uniform initialized.
enum class ParamRole : unsigned char { kWeight, kBackboneWeight, kBias, kScale };

/// A trainable array. Values are kept float32-representable so checkpoints
/// round-trip exactly; gradients and momentum stay in double.
struct Parameter {
  std::vector<int> dims;  // logical dims, e.g. {out, in, 3, 3}
  ParamRole role = ParamRole::kWeight;
  int fan_in = 0;
  int fan_out = 0;
  double init_value = 0.0;  // used by kScale

  Tensor value;
  Tensor grad;
  Tensor momentum;

  void zero_grad();
};

enum class InitScheme { kXavier, kGaussian };

/// Name-ordered collection of parameters.
class ParameterStore {
 public:
  /// Throws std::invalid_argument on a duplicate name.
  Parameter& add(const std::string& name, std::vector<int> dims, ParamRole role, int fan_in = 0,
                 int fan_out = 0, double init_value = 0.0);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

 private:
  std::map<std::string, Parameter> params_;
};

/// Rounds every element to the nearest float32.
void quantize_to_float(Tensor& t);

/// Seeded initialization: weights xavier-uniform (bound sqrt(6/(fan_in+fan_out)))
/// or Gaussian(0, 0.01); backbone weights He-uniform (bound sqrt(6/fan_in));
/// biases zero; scales their init_value.
void init(ParameterStore& store, InitScheme scheme, std::uint64_t seed);

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v; grad <- 0.
void sgd_step(ParameterStore& store, double lr, double momentum = 0.9,
              double weight_decay = 0.0005);

/// One named array in a checkpoint file.
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

/// Binary layout (little endian): "CDET", u32 version, u32 entry count; per
/// entry u32 name length, name bytes, u32 rank, rank x u32 dims, then
/// prod(dims) float32 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

std::vector<CheckpointEntry> to_entries(const ParameterStore& store);
/// Copies values for every parameter in `store` from `entries`; throws
/// ConfigError when a parameter is missing or its dims differ.
void load_entries(ParameterStore& store, const std::vector<CheckpointEntry>& entries);

}  // namespace cdet
