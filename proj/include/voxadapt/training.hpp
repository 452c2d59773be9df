#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "voxadapt/checkpoint.hpp"
#include "voxadapt/data.hpp"
#include "voxadapt/losses.hpp"
#include "voxadapt/network.hpp"

namespace voxadapt {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  std::string preset = "desk";
  std::size_t batch_size = 32;
  AdamConfig adam_g{0.9, 0.999, 1e-8, 0.005, 0.995, 100};
  AdamConfig adam_d{0.9, 0.999, 1e-8, 0.001, 0.995, 100};
  std::uint64_t steps1 = 5000;  ///< image autoencoder pretraining
  std::uint64_t steps2 = 5000;  ///< voxel branch, image autoencoder frozen
  std::uint64_t steps3 = 5000;  ///< joint
  LossConfig loss;
  double lambda2 = 0.01;
  double lambda3 = 0.01;
  double gamma2 = 1.15;
  double gamma3 = 1.15;
  bool literal_s_update = false;
  WSource w_source = WSource::Real;  ///< Synth trains the unadapted baseline
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  ///< 0 disables periodic checkpoints
  double divergence_limit = 1e3;

  void validate() const;
  [[nodiscard]] std::uint64_t total_steps() const { return steps1 + steps2 + steps3; }
  /// Phase executing global step `step` (1..3); 0 once the schedule is done.
  [[nodiscard]] int phase_at(std::uint64_t step) const;
};

struct TrainState {
  int phase = 1;
  std::uint64_t global_step = 0;  ///< steps completed
  ParameterSet g2, d2, g3, d3;
  AdamState adam_g2, adam_d2, adam_g3, adam_d3;
  EquilibriumState eq;
  std::vector<LossReport> history;
};

/// Everything a joint step computes before it applies updates.
struct JointGradients {
  LossReport report;  ///< losses of the pre-update networks
  GradientMap g2, g3;  ///< of the generator loss
  GradientMap d2, d3;  ///< of the discriminator loss
  GradientMap d_wrt_g2, d_wrt_g3;  ///< of the discriminator loss w.r.t. the generators
  double score_real2 = 0.0, score_synth2 = 0.0;
  double score_v3 = 0.0, score_w3 = 0.0, score_wv3 = 0.0;
};

Checkpoint state_to_checkpoint(const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

/// The four networks plus the update rules of the three phases.
class Trainer {
 public:
  Trainer(TrainConfig config, NetworkSuite suite);
  explicit Trainer(TrainConfig config);

  [[nodiscard]] const TrainConfig& config() const noexcept { return config_; }
  [[nodiscard]] const NetworkSuite& suite() const noexcept { return suite_; }
  [[nodiscard]] const Network& g2() const noexcept { return g2_; }
  [[nodiscard]] const Network& d2() const noexcept { return d2_; }
  [[nodiscard]] const Network& g3() const noexcept { return g3_; }
  [[nodiscard]] const Network& d3() const noexcept { return d3_; }

  /// Freshly initialized state; the four networks draw from distinct streams.
  [[nodiscard]] TrainState init() const;

  /// Phase 1: G2 by its objective, then D2, then k.
  LossReport step_stage1(const Batch& batch, TrainState& state) const;
  /// Phase 2: G3 by its objective, then D3, then s; G2 runs in inference mode
  /// and is never written.
  LossReport step_stage2(const Batch& batch, TrainState& state) const;
  /// Phase 3: G2 and G3 by the summed generator loss, D2 and D3 by the summed
  /// discriminator loss, then k and s.
  LossReport step_joint(const Batch& batch, TrainState& state) const;
  /// Forward and backward of a joint step without optimizer or equilibrium
  /// updates. Batch-norm running statistics still advance.
  JointGradients joint_gradients(const Batch& batch, TrainState& state) const;

  /// Runs the step for `state.global_step` on its scheduled batch and appends
  /// the report to the history.
  const LossReport& advance(const Dataset& data, TrainState& state) const;

  /// Latent codes of an image batch (inference mode).
  [[nodiscard]] Tensor encode(const TrainState& state, const Tensor& images) const;
  /// G2 reconstructions of an image batch (inference mode).
  [[nodiscard]] Tensor reconstruct(const TrainState& state, const Tensor& images) const;
  /// Voxel predictions for an image batch: G3(T1(x)) in inference mode.
  [[nodiscard]] Tensor predict_voxels(const TrainState& state, const Tensor& images) const;

 private:
  void guard(const LossReport& r, const char* what) const;

  TrainConfig config_;
  NetworkSuite suite_;
  Network g2_, d2_, g3_, d3_;
};

struct RunOptions {
  std::optional<std::filesystem::path> log_path;         ///< CSV training log
  std::optional<std::filesystem::path> checkpoint_dir;   ///< step<N>.ckpt and final.ckpt
  std::optional<std::filesystem::path> resume_from;
  std::optional<std::uint64_t> stop_after;  ///< halt once this many global steps are done
  std::function<void(const LossReport&)> on_step;
};

/// Executes the remaining schedule, checkpointing at the configured cadence.
TrainState run_schedule(const Trainer& trainer, const Dataset& data, const RunOptions& options = {});

void write_training_log(const std::filesystem::path& path, const std::vector<LossReport>& history);

}  // namespace voxadapt
