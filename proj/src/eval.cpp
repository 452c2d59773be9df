#include "voxadapt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace voxadapt {

namespace {

void check_pair(const VoxelGrid& prediction, const VoxelGrid& truth, double t) {
  if (prediction.size != truth.size || prediction.values.size() != truth.values.size()) {
    throw ShapeError("voxel resolution mismatch: " + std::to_string(prediction.size) + " vs " +
                     std::to_string(truth.size));
  }
  if (prediction.values.size() != prediction.size * prediction.size * prediction.size) {
    throw ShapeError("malformed voxel grid");
  }
  if (!(t > 0.0 && t < 1.0)) throw Error("IoU threshold must lie in (0,1), got " + format_double(t));
  if (!truth.binary()) throw Error("ground-truth grid must be binary");
}

double iou_of(const std::vector<char>& pred, const std::vector<double>& truth) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool y = truth[i] == 1.0;
    inter += p && y;
    uni += p || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<char> threshold(const VoxelGrid& g, double t) {
  std::vector<char> out(g.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.values[i] > t;
  return out;
}

/// Source index along one axis for each output index, or -1 outside.
std::vector<std::ptrdiff_t> axis_map(std::size_t d, int shift, double scale) {
  const double c = (static_cast<double>(d) - 1.0) / 2.0;
  std::vector<std::ptrdiff_t> m(d);
  for (std::size_t p = 0; p < d; ++p) {
    const double src = c + (static_cast<double>(p) - c - shift) / scale;
    const auto i = static_cast<std::ptrdiff_t>(std::floor(src + 0.5));
    m[p] = (i >= 0 && i < static_cast<std::ptrdiff_t>(d)) ? i : -1;
  }
  return m;
}

template <class T>
std::vector<T> resample(const std::vector<T>& in, std::size_t d, const std::array<int, 3>& shift, double scale) {
  const auto mx = axis_map(d, shift[0], scale), my = axis_map(d, shift[1], scale), mz = axis_map(d, shift[2], scale);
  std::vector<T> out(in.size(), T{});
  for (std::size_t x = 0; x < d; ++x) {
    if (mx[x] < 0) continue;
    for (std::size_t y = 0; y < d; ++y) {
      if (my[y] < 0) continue;
      const std::size_t src_row = (static_cast<std::size_t>(mx[x]) * d + static_cast<std::size_t>(my[y])) * d;
      const std::size_t dst_row = (x * d + y) * d;
      for (std::size_t z = 0; z < d; ++z) {
        if (mz[z] >= 0) out[dst_row + z] = in[src_row + static_cast<std::size_t>(mz[z])];
      }
    }
  }
  return out;
}

std::vector<const ImageSample*> pointers(const std::vector<ImageSample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const ImageSample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[i]);
  return out;
}

/// Applies `fn` to image chunks and concatenates the [n, ...] results.
template <class Fn>
Tensor chunked(const std::vector<ImageSample>& samples, std::size_t chunk, Fn&& fn) {
  if (chunk == 0) throw Error("chunk size must be positive");
  std::vector<double> values;
  Shape shape;
  for (std::size_t b = 0; b < samples.size(); b += chunk) {
    const Tensor part = fn(stack_images(pointers(samples, b, std::min(samples.size(), b + chunk))));
    if (shape.empty()) shape = part.shape();
    values.insert(values.end(), part.data().begin(), part.data().end());
  }
  if (shape.empty()) return Tensor();
  shape[0] = samples.size();
  return Tensor(shape, std::move(values));
}

std::vector<double> latent_row(const Tensor& latents, std::size_t i) {
  const std::size_t n = latents.dim(1);
  const auto data = latents.data();
  return {data.begin() + static_cast<std::ptrdiff_t>(i * n), data.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)};
}

double mean_abs_diff(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

/// Mean image over the rows of an [N, 1, H, W] batch.
std::vector<double> mean_image(const Tensor& batch) {
  const std::size_t n = batch.dim(0);
  const std::size_t p = batch.size() / std::max<std::size_t>(n, 1);
  std::vector<double> m(p, 0.0);
  const auto d = batch.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < p; ++q) m[q] += d[i * p + q];
  for (auto& v : m) v /= static_cast<double>(n);
  return m;
}

}  // namespace

double compute_iou(const VoxelGrid& prediction, const VoxelGrid& truth, double t) {
  check_pair(prediction, truth, t);
  return iou_of(threshold(prediction, t), truth.values);
}

void AlignmentGrid::validate() const {
  if (max_shift < 0) throw Error("alignment shift range must be non-negative");
  if (scales.empty()) throw Error("alignment needs at least one scale");
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error("alignment scales must be positive");
  }
}

VoxelGrid transform_grid(const VoxelGrid& grid, const std::array<int, 3>& shift, double scale) {
  if (!(scale > 0.0)) throw Error("scale must be positive");
  VoxelGrid out(grid.size);
  out.values = resample(grid.values, grid.size, shift, scale);
  return out;
}

double compute_iou_aligned(const VoxelGrid& prediction, const VoxelGrid& truth, double t, const AlignmentGrid& grid) {
  check_pair(prediction, truth, t);
  grid.validate();
  const std::vector<char> occupied = threshold(prediction, t);
  double best = iou_of(occupied, truth.values);
  for (double s : grid.scales) {
    for (int dx = -grid.max_shift; dx <= grid.max_shift; ++dx)
      for (int dy = -grid.max_shift; dy <= grid.max_shift; ++dy)
        for (int dz = -grid.max_shift; dz <= grid.max_shift; ++dz) {
          best = std::max(best, iou_of(resample(occupied, prediction.size, {dx, dy, dz}, s), truth.values));
          if (best == 1.0) return best;
        }
  }
  return best;
}

IoUResult summarize_iou(const std::vector<VoxelGrid>& predictions, const std::vector<VoxelGrid>& truths,
                        const std::vector<std::size_t>& item_ids, const std::vector<Category>& categories, double t,
                        const std::optional<AlignmentGrid>& alignment) {
  const std::size_t n = predictions.size();
  if (truths.size() != n || item_ids.size() != n || categories.size() != n) {
    throw Error("IoU inputs differ in length");
  }
  IoUResult r;
  r.threshold = t;
  r.item_ids = item_ids;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = alignment ? compute_iou_aligned(predictions[i], truths[i], t, *alignment)
                               : compute_iou(predictions[i], truths[i], t);
    r.items.push_back(v);
    auto& a = acc[to_string(categories[i])];
    a.first += v;
    ++a.second;
    r.mean += v;
  }
  if (n) r.mean /= static_cast<double>(n);
  for (const auto& [name, a] : acc) r.category_mean[name] = a.first / static_cast<double>(a.second);
  return r;
}

Tensor encode_samples(const Trainer& trainer, const TrainState& state, const std::vector<ImageSample>& samples,
                      std::size_t chunk) {
  return chunked(samples, chunk, [&](const Tensor& x) { return trainer.encode(state, x); });
}

std::vector<VoxelGrid> predict_samples(const Trainer& trainer, const TrainState& state,
                                       const std::vector<ImageSample>& samples, std::size_t chunk) {
  const Tensor all = chunked(samples, chunk, [&](const Tensor& x) { return trainer.predict_voxels(state, x); });
  std::vector<VoxelGrid> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(grid_from_batch(all, i));
  return out;
}

IoUResult evaluate_samples(const Trainer& trainer, const TrainState& state, const Dataset& data,
                           const std::vector<ImageSample>& samples, double t,
                           const std::optional<AlignmentGrid>& alignment) {
  std::vector<VoxelGrid> truths;
  std::vector<std::size_t> ids;
  std::vector<Category> cats;
  for (const auto& s : samples) {
    if (!s.shape_id) throw Error("sample " + std::to_string(s.id) + " has no shape link");
    const ShapeItem& shape = data.shapes().at(*s.shape_id);
    truths.push_back(shape.grid);
    ids.push_back(s.id);
    cats.push_back(shape.recipe.category);
  }
  return summarize_iou(predict_samples(trainer, state, samples), truths, ids, cats, t, alignment);
}

std::vector<ImageSample> held_out_real(const Dataset& data) {
  std::vector<ImageSample> out;
  for (std::size_t s : data.test_shapes())
    for (std::size_t v = 0; v < data.config().views; ++v) out.push_back(data.real_render(s, v));
  return out;
}

RetrievalResult rank_latents(std::size_t query_id, const std::vector<double>& query, const Tensor& pool_latents,
                             const std::vector<std::size_t>& pool_ids, std::size_t k) {
  if (pool_ids.empty()) throw Error("retrieval pool is empty");
  if (k == 0) throw Error("retrieval k must be positive");
  if (pool_latents.rank() != 2 || pool_latents.dim(0) != pool_ids.size() || pool_latents.dim(1) != query.size()) {
    throw ShapeError("pool latents " + shape_to_string(pool_latents.shape()) + " do not match " +
                     std::to_string(pool_ids.size()) + " items of width " + std::to_string(query.size()));
  }
  RetrievalResult r;
  r.query_id = query_id;
  const std::size_t n = query.size();
  const auto d = pool_latents.data();
  for (std::size_t i = 0; i < pool_ids.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double diff = d[i * n + j] - query[j];
      acc += diff * diff;
    }
    r.neighbors.push_back({pool_ids[i], std::sqrt(acc)});
  }
  std::sort(r.neighbors.begin(), r.neighbors.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  if (r.neighbors.size() > k) r.neighbors.resize(k);
  return r;
}

RetrievalResult retrieve_nearest(const Trainer& trainer, const TrainState& state, const ImageSample& query,
                                 const std::vector<ImageSample>& pool, std::size_t k) {
  if (pool.empty()) throw Error("retrieval pool is empty");
  std::vector<std::size_t> ids;
  for (const auto& p : pool) ids.push_back(p.id);
  const Tensor q = encode_samples(trainer, state, {query});
  return rank_latents(query.id, latent_row(q, 0), encode_samples(trainer, state, pool), ids, k);
}

RetrievalScore self_retrieval(const Trainer& trainer, const TrainState& state, const Dataset& data) {
  std::vector<ImageSample> pool;
  for (std::size_t s : data.train_shapes())
    for (std::size_t v = 0; v < data.config().views; ++v) pool.push_back(data.synth_item(s, v));
  std::vector<std::size_t> ids;
  std::map<std::size_t, const ImageSample*> by_id;
  for (const auto& p : pool) {
    ids.push_back(p.id);
    by_id[p.id] = &p;
  }
  const Tensor latents = encode_samples(trainer, state, pool);
  RetrievalScore score;
  score.k = 1;
  score.pool_size = pool.size();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const RetrievalResult r = rank_latents(pool[i].id, latent_row(latents, i), latents, ids, 1);
    const ImageSample& top = *by_id.at(r.neighbors.front().id);
    score.hits += top.id == pool[i].id || top.pixels == pool[i].pixels;
    ++score.queries;
  }
  return score;
}

RetrievalScore cross_domain_retrieval(const Trainer& trainer, const TrainState& state, const Dataset& data,
                                      std::size_t k) {
  const std::vector<std::size_t> shapes = data.train_shapes();
  RetrievalScore score;
  score.k = k;
  score.pool_size = shapes.size();
  for (std::size_t v = 0; v < data.config().views; ++v) {
    std::vector<ImageSample> pool, queries;
    std::vector<std::size_t> ids;
    for (std::size_t s : shapes) {
      pool.push_back(data.synth_item(s, v));
      ids.push_back(pool.back().id);
      queries.push_back(data.real_render(s, v));
    }
    const Tensor pool_latents = encode_samples(trainer, state, pool);
    const Tensor query_latents = encode_samples(trainer, state, queries);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const RetrievalResult r = rank_latents(queries[i].id, latent_row(query_latents, i), pool_latents, ids, k);
      bool hit = false;
      for (const auto& nb : r.neighbors) hit = hit || data.synth().at(nb.id).shape_id == queries[i].shape_id;
      score.hits += hit;
      ++score.queries;
    }
  }
  return score;
}

SweepReport phi2_sweep(const std::vector<double>& values, const TrainConfig& base, const Dataset& data,
                       std::size_t panel_items) {
  if (values.empty()) throw Error("phi2 sweep needs at least one value");
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("phi2 sweep values must lie in [0,1], got " + format_double(v));
  }
  const std::vector<ImageSample> real = held_out_real(data);
  std::vector<ImageSample> synth;
  for (std::size_t s : data.test_shapes())
    for (std::size_t v = 0; v < data.config().views; ++v) synth.push_back(data.synth_item(s, v));

  std::vector<std::size_t> picks;
  const std::size_t shown = std::min(panel_items, real.size());
  for (std::size_t i = 0; i < shown; ++i) picks.push_back(i * real.size() / shown);
  const std::size_t h = data.config().image_size, w = data.config().image_size;
  SweepReport report;
  report.panel = Tensor({1, (values.size() + 1) * h, std::max<std::size_t>(shown, 1) * w}, 0.0);
  auto paste = [&](std::size_t row, std::size_t col, std::span<const double> img) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) report.panel[(row * h + y) * report.panel.dim(2) + col * w + x] = img[y * w + x];
  };
  for (std::size_t c = 0; c < shown; ++c) paste(0, c, real[picks[c]].pixels.data());

  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    TrainConfig cfg = base;
    cfg.loss.phi2 = values[vi];
    cfg.steps2 = 0;
    cfg.steps3 = 0;
    const Trainer trainer(cfg);
    const TrainState state = run_schedule(trainer, data);
    auto recon = [&](const Tensor& x) { return trainer.reconstruct(state, x); };
    const Tensor real_out = chunked(real, 64, recon);
    const Tensor synth_out = chunked(synth, 64, recon);
    const Tensor real_in = chunked(real, 64, [](const Tensor& x) { return x; });
    const Tensor synth_in = chunked(synth, 64, [](const Tensor& x) { return x; });
    SweepRow row;
    row.phi2 = values[vi];
    row.real_l1 = mean_abs_diff(real_out.data(), real_in.data());
    row.synth_l1 = mean_abs_diff(synth_out.data(), synth_in.data());
    row.confusion = mean_abs_diff(mean_image(real_out), mean_image(synth_out));
    report.rows.push_back(row);
    const std::size_t p = h * w;
    for (std::size_t c = 0; c < shown; ++c) paste(vi + 1, c, real_out.data().subspan(picks[c] * p, p));
  }
  return report;
}

void write_sweep(const std::filesystem::path& dir, const SweepReport& report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::ofstream out(dir / "sweep.csv", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + (dir / "sweep.csv").string() + "'");
  out << "phi2,real_l1,synth_l1,confusion\n";
  for (const auto& r : report.rows) {
    out << format_double(r.phi2) << ',' << format_double(r.real_l1) << ',' << format_double(r.synth_l1) << ','
        << format_double(r.confusion) << '\n';
  }
  if (!out) throw Error("failed writing sweep report");
  write_pgm(dir / "sweep_panel.pgm", report.panel);
}

std::vector<ManifestRow> export_outputs(const Trainer& trainer, const TrainState& state, const Dataset& data,
                                        const std::vector<ImageSample>& items, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::set<std::size_t> seen;
  for (const auto& s : items) {
    if (!seen.insert(s.id).second) throw Error("duplicate export item id " + std::to_string(s.id));
  }
  std::vector<ManifestRow> rows;
  if (!items.empty()) {
    const Tensor recon = chunked(items, 64, [&](const Tensor& x) { return trainer.reconstruct(state, x); });
    const std::vector<VoxelGrid> preds = predict_samples(trainer, state, items);
    const std::size_t p = items.front().pixels.size();
    for (std::size_t i = 0; i < items.size(); ++i) {
      const ImageSample& s = items[i];
      const std::string stem = "item" + std::to_string(s.id) + "_";
      auto add = [&](const std::string& kind, const std::string& ext) {
        rows.push_back({s.id, kind, stem + kind + "." + ext, s.azimuth, s.shape_id});
        return dir / rows.back().path;
      };
      write_pgm(add("input", "pgm"), s.pixels);
      write_pgm(add("recon", "pgm"), Tensor(s.pixels.shape(), {recon.data().begin() + static_cast<std::ptrdiff_t>(i * p),
                                                               recon.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * p)}));
      write_voxel(add("pred", "vox"), preds[i]);
      if (s.shape_id) write_voxel(add("truth", "vox"), data.shapes().at(*s.shape_id).grid);
    }
  }
  write_manifest(dir / "manifest.csv", rows);
  return rows;
}

}  // namespace voxadapt
