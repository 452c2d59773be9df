#include "voxadapt/parameters.hpp"

#include <cmath>
#include <cstring>

namespace voxadapt {

void ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) throw Error("duplicate parameter name '" + name + "' in " + name_);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), trainable});
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter '" + name + "' in " + name_);
  return params_[it->second].value;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter '" + name + "' in " + name_);
  return params_[it->second].value;
}

std::size_t ParameterSet::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data().data(), p.value.size() * sizeof(double));
  }
  return h;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.trainable != b.trainable || a.value.shape() != b.value.shape()) return false;
    if (std::memcmp(a.value.data().data(), b.value.data().data(), a.value.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

double AdamState::effective_rate() const {
  const std::uint64_t periods = step / config.decay_steps;
  return config.base_rate * std::pow(config.decay, static_cast<double>(periods));
}

AdamState make_adam_state(const ParameterSet& params, const AdamConfig& config) {
  if (!(config.base_rate > 0.0)) throw Error("Adam base rate must be positive");
  if (!(config.decay > 0.0 && config.decay <= 1.0)) throw Error("Adam decay must lie in (0,1]");
  if (config.decay_steps == 0) throw Error("Adam decay interval must be positive");
  AdamState s;
  s.config = config;
  for (const auto& p : params.entries()) {
    if (!p.trainable) continue;
    s.m.emplace(p.name, Tensor(p.value.shape(), 0.0));
    s.v.emplace(p.name, Tensor(p.value.shape(), 0.0));
  }
  return s;
}

void adam_step(ParameterSet& params, const GradientMap& grads, AdamState& state) {
  for (const auto& p : params.entries()) {
    if (!p.trainable) continue;
    auto it = grads.find(p.name);
    if (it == grads.end()) throw Error("missing gradient for '" + p.name + "' in " + params.name());
    if (it->second.shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for '" + p.name + "'");
    if (!it->second.all_finite()) throw NumericError("non-finite gradient for '" + p.name + "'");
    if (!state.m.contains(p.name)) throw Error("optimizer state has no moments for '" + p.name + "'");
  }
  const AdamConfig& c = state.config;
  const double rate = state.effective_rate();
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& p : params.entries()) {
    if (!p.trainable) continue;
    const Tensor& g = grads.at(p.name);
    Tensor& m = state.m.at(p.name);
    Tensor& v = state.v.at(p.name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= rate * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
  ++state.step;
}

}  // namespace voxadapt
