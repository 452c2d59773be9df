#include "voxadapt/training.hpp"

#include <cmath>
#include <fstream>

namespace voxadapt {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  for (const AdamConfig* a : {&adam_g, &adam_d}) {
    if (!(a->base_rate > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(a->decay > 0.0 && a->decay <= 1.0)) throw ConfigError("learning-rate decays must lie in (0,1]");
    if (a->decay_steps == 0) throw ConfigError("decay interval must be positive");
  }
  loss.validate();
  if (!(lambda2 >= 0.0 && lambda3 >= 0.0)) throw ConfigError("equilibrium rates must be non-negative");
  if (!(gamma2 > 0.0 && gamma3 > 0.0)) throw ConfigError("equilibrium ratios must be positive");
  if (!(divergence_limit > 0.0)) throw ConfigError("divergence limit must be positive");
  if ((steps1 || steps3) && batch_size < 1) throw ConfigError("batch size must be positive");
}

int TrainConfig::phase_at(std::uint64_t step) const {
  if (step < steps1) return 1;
  if (step < steps1 + steps2) return 2;
  if (step < total_steps()) return 3;
  return 0;
}

// ---------------------------------------------------------------------------
// Checkpoint mapping

namespace {

constexpr const char* kNets[] = {"G2", "D2", "G3", "D3"};
constexpr std::size_t kHistoryCols = 19;

std::vector<double> report_row(const LossReport& r) {
  return {static_cast<double>(r.step), static_cast<double>(r.phase), r.rec2_w, r.rec2_wv, r.adv2, r.g2, r.d2, r.k,
          r.rec3, r.adv3, r.g3, r.d3, r.s, r.g, r.d, r.m2, r.m3, r.lr_g, r.lr_d};
}

LossReport row_report(const double* v) {
  LossReport r;
  r.step = static_cast<std::uint64_t>(v[0]);
  r.phase = static_cast<int>(v[1]);
  double* dst[] = {&r.rec2_w, &r.rec2_wv, &r.adv2, &r.g2, &r.d2, &r.k, &r.rec3, &r.adv3, &r.g3,
                   &r.d3,     &r.s,       &r.g,    &r.d,  &r.m2, &r.m3, &r.lr_g, &r.lr_d};
  for (std::size_t i = 0; i < 17; ++i) *dst[i] = v[i + 2];
  return r;
}

}  // namespace

Checkpoint state_to_checkpoint(const TrainState& s) {
  Checkpoint c;
  c.put_counter("phase", static_cast<std::uint64_t>(s.phase));
  c.put_counter("global_step", s.global_step);
  const ParameterSet* sets[] = {&s.g2, &s.d2, &s.g3, &s.d3};
  const AdamState* opts[] = {&s.adam_g2, &s.adam_d2, &s.adam_g3, &s.adam_d3};
  for (int i = 0; i < 4; ++i) {
    c.put_parameters(kNets[i], *sets[i]);
    c.put_adam(std::string("adam.") + kNets[i], *opts[i]);
  }
  c.put("equilibrium", Tensor({6}, {s.eq.k, s.eq.s, s.eq.lambda2, s.eq.lambda3, s.eq.gamma2, s.eq.gamma3}));
  c.put_counter("equilibrium.literal_s_update", s.eq.literal_s_update ? 1 : 0);
  c.put_counter("history_rows", s.history.size());
  if (!s.history.empty()) {
    std::vector<double> flat;
    flat.reserve(s.history.size() * kHistoryCols);
    for (const auto& r : s.history) {
      const auto row = report_row(r);
      flat.insert(flat.end(), row.begin(), row.end());
    }
    c.put("history", Tensor({s.history.size(), kHistoryCols}, std::move(flat)));
  }
  return c;
}

TrainState state_from_checkpoint(const Checkpoint& c) {
  TrainState s;
  s.phase = static_cast<int>(c.counter("phase"));
  s.global_step = c.counter("global_step");
  ParameterSet* sets[] = {&s.g2, &s.d2, &s.g3, &s.d3};
  AdamState* opts[] = {&s.adam_g2, &s.adam_d2, &s.adam_g3, &s.adam_d3};
  for (int i = 0; i < 4; ++i) {
    *sets[i] = c.parameters(kNets[i]);
    *opts[i] = c.adam(std::string("adam.") + kNets[i]);
  }
  const Tensor& eq = c.tensor("equilibrium");
  if (eq.size() != 6) throw FormatError("malformed equilibrium record");
  s.eq.k = eq[0];
  s.eq.s = eq[1];
  s.eq.lambda2 = eq[2];
  s.eq.lambda3 = eq[3];
  s.eq.gamma2 = eq[4];
  s.eq.gamma3 = eq[5];
  s.eq.literal_s_update = c.counter("equilibrium.literal_s_update") != 0;
  const std::uint64_t rows = c.counter("history_rows");
  if (rows) {
    const Tensor& h = c.tensor("history");
    if (h.shape() != Shape{rows, kHistoryCols}) throw FormatError("malformed training history");
    for (std::uint64_t i = 0; i < rows; ++i) s.history.push_back(row_report(h.values().data() + i * kHistoryCols));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, NetworkSuite suite)
    : config_(std::move(config)), suite_(std::move(suite)), g2_(suite_.g2), d2_(suite_.d2), g3_(suite_.g3), d3_(suite_.d3) {
  config_.validate();
}

Trainer::Trainer(TrainConfig config) : Trainer(config, suite_by_name(config.preset)) {}

TrainState Trainer::init() const {
  TrainState s;
  s.g2 = g2_.build(mix_seed(config_.seed, 21));
  s.d2 = d2_.build(mix_seed(config_.seed, 22));
  s.g3 = g3_.build(mix_seed(config_.seed, 23));
  s.d3 = d3_.build(mix_seed(config_.seed, 24));
  s.adam_g2 = make_adam_state(s.g2, config_.adam_g);
  s.adam_d2 = make_adam_state(s.d2, config_.adam_d);
  s.adam_g3 = make_adam_state(s.g3, config_.adam_g);
  s.adam_d3 = make_adam_state(s.d3, config_.adam_d);
  s.eq.lambda2 = config_.lambda2;
  s.eq.lambda3 = config_.lambda3;
  s.eq.gamma2 = config_.gamma2;
  s.eq.gamma3 = config_.gamma3;
  s.eq.literal_s_update = config_.literal_s_update;
  s.phase = config_.phase_at(0);
  return s;
}

void Trainer::guard(const LossReport& r, const char* what) const {
  const double vals[] = {r.rec2_w, r.rec2_wv, r.g2, r.d2, r.rec3, r.g3, r.d3, r.g, r.d};
  for (double v : vals) {
    if (!std::isfinite(v) || std::abs(v) > config_.divergence_limit) {
      throw TrainingError(std::string(what) + " diverged at step " + std::to_string(r.step) + " (phase " +
                          std::to_string(r.phase) + "): loss value " + std::to_string(v));
    }
  }
}

namespace {

constexpr ForwardOptions kTrain{Mode::Train, true};
constexpr ForwardOptions kTrainFrozenStats{Mode::Train, false};
constexpr ForwardOptions kInference{Mode::Inference, false};

double item(const Tape& t, Var v) { return t.value(v).item(); }

void require_batch(const Batch& b) {
  const std::size_t n = b.w.dim(0);
  if (b.w_v.dim(0) != n || b.v_w.dim(0) != n) throw ShapeError("batch parts differ in size");
}

Tensor concat2(const Tensor& a, const Tensor& b) { return concat_batch(std::vector<Tensor>{a, b}); }

}  // namespace

LossReport Trainer::step_stage1(const Batch& batch, TrainState& state) const {
  require_batch(batch);
  const std::size_t n = batch.w.dim(0);
  const LossConfig& cfg = config_.loss;
  LossReport r;
  r.step = state.global_step;
  r.phase = 1;
  r.lr_g = state.adam_g2.effective_rate();
  r.lr_d = state.adam_d2.effective_rate();

  // Generator: reconstruct both domains in one batch so normalization sees both.
  Tape gt(true);
  Binding g2b(gt, state.g2), d2b(gt, state.d2);
  const Var x = gt.leaf(concat2(batch.w, batch.w_v));
  const Var out = g2_.forward(gt, x, g2b, kTrain);
  const Var rec_w = l1_loss(gt, slice_batch(gt, out, 0, n), gt.leaf(batch.w));
  const Var rec_wv = l1_loss(gt, slice_batch(gt, out, n, 2 * n), gt.leaf(batch.w_v));
  Var adv = gt.leaf(Tensor::scalar(0.0));
  if (cfg.phi2 > 0.0) {
    const Var rec = d2_.forward(gt, out, d2b, kTrainFrozenStats);
    adv = autoencoder_score(gt, out, rec, 0, n);
  }
  const Var lg = g2_loss(gt, rec_w, rec_wv, adv, cfg);
  r.rec2_w = item(gt, rec_w);
  r.rec2_wv = item(gt, rec_wv);
  r.g2 = item(gt, lg);
  const Tensor generated = gt.value(out);
  const GradientMap g2_grads = backward(gt, lg, g2b);

  // Discriminator on the same generated outputs, as constants.
  Tape dt(true);
  Binding d2d(dt, state.d2);
  const Var fake = dt.leaf(generated);
  const Var drec = d2_.forward(dt, fake, d2d, kTrain);
  const Var score_real = autoencoder_score(dt, fake, drec, 0, n);
  const Var score_synth = autoencoder_score(dt, fake, drec, n, 2 * n);
  const Var ld = d2_loss(dt, score_real, score_synth, state.eq.k);
  r.adv2 = item(dt, score_real);
  r.d2 = item(dt, ld);
  r.g = r.g2;
  r.d = r.d2;
  guard(r, "stage-1 step");
  const GradientMap d2_grads = backward(dt, ld, d2d);

  adam_step(state.g2, g2_grads, state.adam_g2);
  adam_step(state.d2, d2_grads, state.adam_d2);
  const double s_synth = item(dt, score_synth);
  state.eq.k = d2_losses(r.adv2, s_synth, state.eq).next;
  r.k = state.eq.k;
  r.s = state.eq.s;
  r.m2 = convergence_measure(s_synth, r.adv2, state.eq.gamma2);
  return r;
}

LossReport Trainer::step_stage2(const Batch& batch, TrainState& state) const {
  require_batch(batch);
  const std::size_t n = batch.w.dim(0);
  const LossConfig& cfg = config_.loss;
  LossReport r;
  r.step = state.global_step;
  r.phase = 2;
  r.lr_g = state.adam_g3.effective_rate();
  r.lr_d = state.adam_d3.effective_rate();

  Tensor latent;
  {
    Tape ft(false);
    Binding g2b(ft, state.g2);
    latent = ft.value(g2_.encode(ft, ft.leaf(concat2(batch.w, batch.w_v)), g2b, kInference));
  }

  Tape gt(true);
  Binding g3b(gt, state.g3), d3b(gt, state.d3);
  const Var gen = g3_.forward(gt, gt.leaf(latent), g3b, kTrain);
  const Var truth = gt.leaf(batch.v_w);
  const Var rec3 = l1_loss(gt, slice_batch(gt, gen, n, 2 * n), truth);
  Var adv_w = gt.leaf(Tensor::scalar(0.0)), adv_wv = adv_w;
  if (cfg.phi3 > 0.0) {
    const std::vector<Var> parts{truth, gen};
    const Var all = concat_batch(gt, parts);
    const Var rec = d3_.forward(gt, all, d3b, kTrainFrozenStats);
    adv_w = autoencoder_score(gt, all, rec, n, 2 * n);
    adv_wv = autoencoder_score(gt, all, rec, 2 * n, 3 * n);
  }
  const Var lg = g3_loss(gt, rec3, adv_w, adv_wv, cfg);
  r.rec3 = item(gt, rec3);
  r.g3 = item(gt, lg);
  const Tensor generated = gt.value(gen);
  const GradientMap g3_grads = backward(gt, lg, g3b);

  Tape dt(true);
  Binding d3d(dt, state.d3);
  const Var all = dt.leaf(concat2(batch.v_w, generated));
  const Var drec = d3_.forward(dt, all, d3d, kTrain);
  const Var sv = autoencoder_score(dt, all, drec, 0, n);
  const Var sw = autoencoder_score(dt, all, drec, n, 2 * n);
  const Var swv = autoencoder_score(dt, all, drec, 2 * n, 3 * n);
  const Var ld = d3_loss(dt, sv, sw, swv, state.eq.s);
  r.d3 = item(dt, ld);
  r.g = r.g3;
  r.d = r.d3;
  guard(r, "stage-2 step");
  const GradientMap d3_grads = backward(dt, ld, d3d);

  adam_step(state.g3, g3_grads, state.adam_g3);
  adam_step(state.d3, d3_grads, state.adam_d3);
  const double v_score = item(dt, sv), w_score = item(dt, sw), wv_score = item(dt, swv);
  r.adv3 = 0.5 * (w_score + wv_score);
  state.eq.s = d3_losses(v_score, w_score, wv_score, state.eq).next;
  r.k = state.eq.k;
  r.s = state.eq.s;
  r.m3 = convergence_measure(v_score, r.adv3, state.eq.gamma3);
  return r;
}

JointGradients Trainer::joint_gradients(const Batch& batch, TrainState& state) const {
  require_batch(batch);
  const std::size_t n = batch.w.dim(0);
  const LossConfig& cfg = config_.loss;
  JointGradients out;
  LossReport& r = out.report;
  r.step = state.global_step;
  r.phase = 3;
  r.lr_g = state.adam_g2.effective_rate();
  r.lr_d = state.adam_d2.effective_rate();

  Tape t(true);
  Binding g2b(t, state.g2), d2b(t, state.d2), g3b(t, state.g3), d3b(t, state.d3);
  const Var x = t.leaf(concat2(batch.w, batch.w_v));
  const Var z = g2_.encode(t, x, g2b, kTrain);
  const Var img = g2_.decode(t, z, g2b, kTrain);
  const Var gen = g3_.forward(t, z, g3b, kTrain);
  const Var truth = t.leaf(batch.v_w);

  // Generator objective.
  const Var rec_w = l1_loss(t, slice_batch(t, img, 0, n), t.leaf(batch.w));
  const Var rec_wv = l1_loss(t, slice_batch(t, img, n, 2 * n), t.leaf(batch.w_v));
  const Var rec3 = l1_loss(t, slice_batch(t, gen, n, 2 * n), truth);
  Var adv2 = t.leaf(Tensor::scalar(0.0));
  if (cfg.phi2 > 0.0) adv2 = autoencoder_score(t, img, d2_.forward(t, img, d2b, kTrainFrozenStats), 0, n);
  Var adv_w = t.leaf(Tensor::scalar(0.0)), adv_wv = adv_w;
  if (cfg.phi3 > 0.0) {
    const std::vector<Var> parts{truth, gen};
    const Var all = concat_batch(t, parts);
    const Var rec = d3_.forward(t, all, d3b, kTrainFrozenStats);
    adv_w = autoencoder_score(t, all, rec, n, 2 * n);
    adv_wv = autoencoder_score(t, all, rec, 2 * n, 3 * n);
  }
  const Var lg2 = g2_loss(t, rec_w, rec_wv, adv2, cfg);
  const Var lg3 = g3_loss(t, rec3, adv_w, adv_wv, cfg);
  const Var lg = add(t, lg2, lg3);

  // Discriminator objective on detached generator outputs.
  const Var fake2 = detach(t, img);
  const Var drec2 = d2_.forward(t, fake2, d2b, kTrain);
  const Var s_real = autoencoder_score(t, fake2, drec2, 0, n);
  const Var s_synth = autoencoder_score(t, fake2, drec2, n, 2 * n);
  const Var ld2 = d2_loss(t, s_real, s_synth, state.eq.k);
  const std::vector<Var> parts3{truth, detach(t, gen)};
  const Var all3 = concat_batch(t, parts3);
  const Var drec3 = d3_.forward(t, all3, d3b, kTrain);
  const Var sv = autoencoder_score(t, all3, drec3, 0, n);
  const Var sw = autoencoder_score(t, all3, drec3, n, 2 * n);
  const Var swv = autoencoder_score(t, all3, drec3, 2 * n, 3 * n);
  const Var ld3 = d3_loss(t, sv, sw, swv, state.eq.s);
  const Var ld = add(t, ld2, ld3);

  r.rec2_w = item(t, rec_w);
  r.rec2_wv = item(t, rec_wv);
  r.g2 = item(t, lg2);
  r.rec3 = item(t, rec3);
  r.g3 = item(t, lg3);
  r.d2 = item(t, ld2);
  r.d3 = item(t, ld3);
  const TotalLosses tot = total_losses(r.g2, r.g3, r.d2, r.d3);
  r.g = tot.generator;
  r.d = tot.discriminator;
  out.score_real2 = item(t, s_real);
  out.score_synth2 = item(t, s_synth);
  out.score_v3 = item(t, sv);
  out.score_w3 = item(t, sw);
  out.score_wv3 = item(t, swv);
  r.adv2 = out.score_real2;
  r.adv3 = 0.5 * (out.score_w3 + out.score_wv3);
  guard(r, "joint step");

  auto gg = backward(t, lg, {&g2b, &g3b});
  auto dg = backward(t, ld, {&d2b, &d3b, &g2b, &g3b});
  out.g2 = std::move(gg[0]);
  out.g3 = std::move(gg[1]);
  out.d2 = std::move(dg[0]);
  out.d3 = std::move(dg[1]);
  out.d_wrt_g2 = std::move(dg[2]);
  out.d_wrt_g3 = std::move(dg[3]);
  return out;
}

LossReport Trainer::step_joint(const Batch& batch, TrainState& state) const {
  JointGradients jg = joint_gradients(batch, state);
  adam_step(state.g2, jg.g2, state.adam_g2);
  adam_step(state.g3, jg.g3, state.adam_g3);
  adam_step(state.d2, jg.d2, state.adam_d2);
  adam_step(state.d3, jg.d3, state.adam_d3);
  LossReport& r = jg.report;
  state.eq.k = d2_losses(jg.score_real2, jg.score_synth2, state.eq).next;
  state.eq.s = d3_losses(jg.score_v3, jg.score_w3, jg.score_wv3, state.eq).next;
  r.k = state.eq.k;
  r.s = state.eq.s;
  r.m2 = convergence_measure(jg.score_synth2, jg.score_real2, state.eq.gamma2);
  r.m3 = convergence_measure(jg.score_v3, r.adv3, state.eq.gamma3);
  return r;
}

const LossReport& Trainer::advance(const Dataset& data, TrainState& state) const {
  const int phase = config_.phase_at(state.global_step);
  if (phase == 0) throw TrainingError("schedule already complete");
  const Batch batch = data.sample_batch(config_.seed, state.global_step, config_.batch_size, config_.w_source);
  state.phase = phase;
  LossReport r;
  try {
    switch (phase) {
      case 1: r = step_stage1(batch, state); break;
      case 2: r = step_stage2(batch, state); break;
      default: r = step_joint(batch, state); break;
    }
  } catch (const TrainingError&) {
    throw;
  } catch (const Error& e) {
    throw TrainingError("phase " + std::to_string(phase) + " step " + std::to_string(state.global_step) + ": " +
                        e.what());
  }
  ++state.global_step;
  state.phase = config_.phase_at(state.global_step);
  state.history.push_back(r);
  return state.history.back();
}

Tensor Trainer::encode(const TrainState& state, const Tensor& images) const {
  Tape t(false);
  ParameterSet g2 = state.g2;
  Binding b(t, g2);
  return t.value(g2_.encode(t, t.leaf(images), b, kInference));
}

Tensor Trainer::reconstruct(const TrainState& state, const Tensor& images) const {
  Tape t(false);
  ParameterSet g2 = state.g2;
  Binding b(t, g2);
  return t.value(g2_.forward(t, t.leaf(images), b, kInference));
}

Tensor Trainer::predict_voxels(const TrainState& state, const Tensor& images) const {
  Tape t(false);
  ParameterSet g2 = state.g2, g3 = state.g3;
  Binding b2(t, g2), b3(t, g3);
  const Var z = g2_.encode(t, t.leaf(images), b2, kInference);
  return t.value(g3_.forward(t, z, b3, kInference));
}

// ---------------------------------------------------------------------------
// Schedule

void write_training_log(const std::filesystem::path& path, const std::vector<LossReport>& history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open training log '" + path.string() + "'");
  out << loss_report_csv_header() << '\n';
  for (const auto& r : history) out << loss_report_csv_row(r) << '\n';
  if (!out) throw Error("failed writing training log '" + path.string() + "'");
}

TrainState run_schedule(const Trainer& trainer, const Dataset& data, const RunOptions& options) {
  const TrainConfig& cfg = trainer.config();
  TrainState state = options.resume_from ? state_from_checkpoint(read_checkpoint(*options.resume_from)) : trainer.init();
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  const std::uint64_t end = std::min(cfg.total_steps(), options.stop_after.value_or(cfg.total_steps()));
  while (state.global_step < end) {
    const LossReport& r = trainer.advance(data, state);
    if (options.on_step) options.on_step(r);
    if (options.checkpoint_dir && cfg.checkpoint_every && state.global_step % cfg.checkpoint_every == 0) {
      write_checkpoint(*options.checkpoint_dir / ("step" + std::to_string(state.global_step) + ".ckpt"),
                       state_to_checkpoint(state));
    }
  }
  if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir / "final.ckpt", state_to_checkpoint(state));
  if (options.log_path) write_training_log(*options.log_path, state.history);
  return state;
}

}  // namespace voxadapt
