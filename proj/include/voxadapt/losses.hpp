#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "voxadapt/autodiff.hpp"

namespace voxadapt {

/// Balance variables of the two autoencoder discriminators.
struct EquilibriumState {
  double k = 0.0;  ///< image discriminator weight on generated real-domain outputs
  double s = 0.0;  ///< voxel discriminator weight on generated voxels
  double lambda2 = 0.01;
  double lambda3 = 0.01;
  double gamma2 = 1.15;
  double gamma3 = 1.15;
  /// Use the s update exactly as typeset (generated real-domain score in the
  /// gamma slot) instead of the balanced form that mirrors the k update.
  bool literal_s_update = false;
};

struct LossConfig {
  double phi2 = 0.7;  ///< adversarial weight in the image generator objective
  double phi3 = 0.2;  ///< adversarial weight in the voxel generator objective
  void validate() const;
};

/// Scalar components of one training step.
struct LossReport {
  std::uint64_t step = 0;
  int phase = 0;
  double rec2_w = 0;   ///< reconstruction of real-domain images
  double rec2_wv = 0;  ///< reconstruction of synthesized images
  double adv2 = 0;     ///< discriminator score of generated real-domain outputs
  double g2 = 0;
  double d2 = 0;
  double k = 0;
  double rec3 = 0;
  double adv3 = 0;  ///< mean discriminator score of generated voxels
  double g3 = 0;
  double d3 = 0;
  double s = 0;
  double g = 0;
  double d = 0;
  double m2 = 0;
  double m3 = 0;
  double lr_g = 0;
  double lr_d = 0;

  [[nodiscard]] bool all_finite() const;
  bool operator==(const LossReport&) const = default;
};

/// Header of the CSV training log.
std::string loss_report_csv_header();
/// One CSV row with round-trip precision.
std::string loss_report_csv_row(const LossReport& r);

/// Mean absolute reconstruction error of an image batch.
double rec_loss_2d(const Tensor& input, const Tensor& reconstruction);

struct DiscriminatorUpdate {
  double loss = 0.0;
  double next = 0.0;  ///< updated, clamped equilibrium variable
};

/// Image discriminator objective and k update. `score_synth` is the
/// discriminator score of generated synthesized-domain outputs (the side the
/// discriminator treats as true); `score_real` that of generated real-domain
/// outputs.
DiscriminatorUpdate d2_losses(double score_real, double score_synth, const EquilibriumState& eq);

/// 0.5 (1 - phi2) (rec_w + rec_wv) + phi2 adv_w
double g2_loss(double rec_w, double rec_wv, double adv_w, const LossConfig& cfg);

/// Mean absolute voxel error over paired items. `paired`, when given, flags
/// which batch rows carry a ground-truth link; any unpaired row is an error.
double rec_loss_3d(const Tensor& generated, const Tensor& truth, std::span<const bool> paired = {});

/// Voxel discriminator objective and s update.
DiscriminatorUpdate d3_losses(double score_voxel, double score_gen_real, double score_gen_synth,
                              const EquilibriumState& eq);

/// (1 - phi3) rec3 + phi3 adv_mean
double g3_loss(double rec3, double adv_mean, const LossConfig& cfg);

struct TotalLosses {
  double generator = 0.0;
  double discriminator = 0.0;
};

/// Joint sums; every component must be present.
TotalLosses total_losses(std::optional<double> g2, std::optional<double> g3, std::optional<double> d2,
                         std::optional<double> d3);

/// real + |gamma real - fake|
double convergence_measure(double real_score, double fake_score, double gamma);

// Tape forms of the weighted objectives, sharing the scalar coefficients above.
Var g2_loss(Tape& tape, Var rec_w, Var rec_wv, Var adv_w, const LossConfig& cfg);
Var g3_loss(Tape& tape, Var rec3, Var adv_real, Var adv_synth, const LossConfig& cfg);
Var d2_loss(Tape& tape, Var score_real, Var score_synth, double k);
Var d3_loss(Tape& tape, Var score_voxel, Var score_gen_real, Var score_gen_synth, double s);

}  // namespace voxadapt
