#include "voxadapt/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace voxadapt {

void LossConfig::validate() const {
  if (!(phi2 >= 0.0 && phi2 <= 1.0)) throw Error("phi2 must lie in [0,1]");
  if (!(phi3 >= 0.0 && phi3 <= 1.0)) throw Error("phi3 must lie in [0,1]");
}

bool LossReport::all_finite() const {
  for (double v : {rec2_w, rec2_wv, adv2, g2, d2, k, rec3, adv3, g3, d3, s, g, d, m2, m3, lr_g, lr_d}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string loss_report_csv_header() {
  return "step,phase,L_rec2_w,L_rec2_wV,L_G2,L_D2,k,L_rec3,L_G3,L_D3,s,L_G,L_D,M2,M3,lr_G,lr_D";
}

std::string loss_report_csv_row(const LossReport& r) {
  std::string out = std::to_string(r.step) + "," + std::to_string(r.phase);
  for (double v : {r.rec2_w, r.rec2_wv, r.g2, r.d2, r.k, r.rec3, r.g3, r.d3, r.s, r.g, r.d, r.m2, r.m3, r.lr_g, r.lr_d}) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out += ',';
    out.append(buf, res.ptr);
  }
  return out;
}

double rec_loss_2d(const Tensor& input, const Tensor& reconstruction) {
  if (input.shape() != reconstruction.shape()) {
    throw ShapeError("reconstruction shape " + shape_to_string(reconstruction.shape()) + " differs from input " +
                     shape_to_string(input.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) acc += std::abs(input[i] - reconstruction[i]);
  return acc / static_cast<double>(input.size());
}

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void require_scores(std::initializer_list<double> scores) {
  for (double s : scores) {
    if (!(s >= 0.0)) throw Error("discriminator scores must be non-negative");
  }
}

}  // namespace

DiscriminatorUpdate d2_losses(double score_real, double score_synth, const EquilibriumState& eq) {
  require_scores({score_real, score_synth});
  DiscriminatorUpdate u;
  u.loss = score_synth - eq.k * score_real;
  u.next = clamp01(eq.k + eq.lambda2 * (eq.gamma2 * score_synth - score_real));
  return u;
}

double g2_loss(double rec_w, double rec_wv, double adv_w, const LossConfig& cfg) {
  cfg.validate();
  const double rec_weight = 0.5 * (1.0 - cfg.phi2);
  return rec_weight * (rec_w + rec_wv) + cfg.phi2 * adv_w;
}

double rec_loss_3d(const Tensor& generated, const Tensor& truth, std::span<const bool> paired) {
  if (!paired.empty()) {
    if (paired.size() != generated.dim(0)) throw ShapeError("pairing flags do not cover the batch");
    for (std::size_t i = 0; i < paired.size(); ++i) {
      if (!paired[i]) throw Error("batch row " + std::to_string(i) + " has no ground-truth voxel link");
    }
  }
  return rec_loss_2d(truth, generated);
}

DiscriminatorUpdate d3_losses(double score_voxel, double score_gen_real, double score_gen_synth,
                              const EquilibriumState& eq) {
  require_scores({score_voxel, score_gen_real, score_gen_synth});
  const double gen_mean = 0.5 * (score_gen_real + score_gen_synth);
  DiscriminatorUpdate u;
  u.loss = score_voxel - eq.s * gen_mean;
  const double anchor = eq.literal_s_update ? score_gen_real : score_voxel;
  u.next = clamp01(eq.s + eq.lambda3 * (eq.gamma3 * anchor - gen_mean));
  return u;
}

double g3_loss(double rec3, double adv_mean, const LossConfig& cfg) {
  cfg.validate();
  return (1.0 - cfg.phi3) * rec3 + cfg.phi3 * adv_mean;
}

TotalLosses total_losses(std::optional<double> g2, std::optional<double> g3, std::optional<double> d2,
                         std::optional<double> d3) {
  if (!g2 || !g3 || !d2 || !d3) throw Error("total_losses needs all four component losses");
  return TotalLosses{*g2 + *g3, *d2 + *d3};
}

double convergence_measure(double real_score, double fake_score, double gamma) {
  return real_score + std::abs(gamma * real_score - fake_score);
}

Var g2_loss(Tape& tape, Var rec_w, Var rec_wv, Var adv_w, const LossConfig& cfg) {
  cfg.validate();
  const double rec_weight = 0.5 * (1.0 - cfg.phi2);
  return add(tape, scale(tape, add(tape, rec_w, rec_wv), rec_weight), scale(tape, adv_w, cfg.phi2));
}

Var g3_loss(Tape& tape, Var rec3, Var adv_real, Var adv_synth, const LossConfig& cfg) {
  cfg.validate();
  Var adv = scale(tape, add(tape, adv_real, adv_synth), 0.5);
  return add(tape, scale(tape, rec3, 1.0 - cfg.phi3), scale(tape, adv, cfg.phi3));
}

Var d2_loss(Tape& tape, Var score_real, Var score_synth, double k) {
  return sub(tape, score_synth, scale(tape, score_real, k));
}

Var d3_loss(Tape& tape, Var score_voxel, Var score_gen_real, Var score_gen_synth, double s) {
  Var gen_mean = scale(tape, add(tape, score_gen_real, score_gen_synth), 0.5);
  return sub(tape, score_voxel, scale(tape, gen_mean, s));
}

}  // namespace voxadapt
