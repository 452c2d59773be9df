#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxadapt/tensor.hpp"

namespace voxadapt {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// Named, ordered collection of tensors belonging to one network. Trainable
/// entries are updated by the optimizer; the rest (batch-norm running
/// statistics) are mutated only by train-mode forward passes.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::string name) : name_(std::move(name)) {}

  [[nodiscard]] const std::string& name() const noexcept { return name_; }

  void add(std::string name, Tensor value, bool trainable = true);
  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }
  [[nodiscard]] Tensor& get(const std::string& name);
  [[nodiscard]] const Tensor& get(const std::string& name) const;

  [[nodiscard]] std::vector<Parameter>& entries() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter>& entries() const noexcept { return params_; }
  [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }

  /// Number of scalar values in trainable tensors.
  [[nodiscard]] std::size_t trainable_scalar_count() const;

  /// FNV-1a digest over names and raw bytes of every tensor.
  [[nodiscard]] std::uint64_t checksum() const;

  bool operator==(const ParameterSet& other) const;

 private:
  std::string name_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

using GradientMap = std::map<std::string, Tensor>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_rate = 0.005;
  double decay = 0.995;  ///< multiplicative per decay interval
  std::uint64_t decay_steps = 1;  ///< updates per decay interval (staircase)
};

/// Moment estimates for every trainable tensor of one ParameterSet.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;

  /// Rate applied by the next update: base_rate * decay^floor(step / decay_steps).
  [[nodiscard]] double effective_rate() const;
};

AdamState make_adam_state(const ParameterSet& params, const AdamConfig& config);

/// One bias-corrected Adam update of every trainable tensor. Throws if a
/// gradient is missing, mis-shaped or non-finite; nothing is modified then.
void adam_step(ParameterSet& params, const GradientMap& grads, AdamState& state);

}  // namespace voxadapt
