#include "voxadapt/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace voxadapt {

// ---------------------------------------------------------------------------
// Voxel grids

std::size_t VoxelGrid::occupied(double t) const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [t](double v) { return v > t; }));
}

bool VoxelGrid::binary() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

Tensor VoxelGrid::to_tensor() const { return Tensor({1, size, size, size}, values); }

VoxelGrid VoxelGrid::from_tensor(const Tensor& t) {
  const auto& s = t.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != s[2] || s[2] != s[3]) {
    throw ShapeError("voxel tensor must be [1,D,D,D], got " + shape_to_string(s));
  }
  VoxelGrid g(s[1]);
  g.values = t.values();
  return g;
}

Tensor stack_grids(const std::vector<const VoxelGrid*>& grids) {
  if (grids.empty()) throw ShapeError("cannot stack an empty grid list");
  const std::size_t d = grids.front()->size;
  Tensor out({grids.size(), 1, d, d, d});
  const std::size_t per = d * d * d;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i]->size != d) throw ShapeError("grids of different resolution in one batch");
    std::copy(grids[i]->values.begin(), grids[i]->values.end(), out.data().begin() + static_cast<long>(i * per));
  }
  return out;
}

VoxelGrid grid_from_batch(const Tensor& batch, std::size_t i) {
  if (batch.rank() != 5 || batch.dim(1) != 1) throw ShapeError("expected [N,1,D,D,D], got " + shape_to_string(batch.shape()));
  const std::size_t d = batch.dim(2);
  VoxelGrid g(d);
  const std::size_t per = d * d * d;
  std::copy(batch.values().begin() + static_cast<long>(i * per), batch.values().begin() + static_cast<long>((i + 1) * per),
            g.values.begin());
  return g;
}

// ---------------------------------------------------------------------------
// Recipes

std::string to_string(Category c) {
  switch (c) {
    case Category::Chair: return "chair";
    case Category::Table: return "table";
    case Category::Box: return "box";
  }
  return "?";
}

Category parse_category(const std::string& s) {
  if (s == "chair") return Category::Chair;
  if (s == "table") return Category::Table;
  if (s == "box") return Category::Box;
  throw Error("unknown shape category '" + s + "'");
}

namespace {

long to_voxel(double fraction, std::size_t d) { return static_cast<long>(std::floor(fraction * static_cast<double>(d) + 0.5)); }

Cuboid make_part(const char* what, long x0, long x1, long y0, long y1, long z0, long z1, std::size_t d) {
  const long n = static_cast<long>(d);
  for (auto [lo, hi] : {std::pair{x0, x1}, std::pair{y0, y1}, std::pair{z0, z1}}) {
    if (lo < 0 || hi > n) throw Error(std::string("shape part '") + what + "' leaves the grid");
    if (hi <= lo) throw Error(std::string("shape part '") + what + "' is empty");
  }
  Cuboid c;
  c.lo = {static_cast<std::size_t>(x0), static_cast<std::size_t>(y0), static_cast<std::size_t>(z0)};
  c.hi = {static_cast<std::size_t>(x1), static_cast<std::size_t>(y1), static_cast<std::size_t>(z1)};
  return c;
}

}  // namespace

std::vector<Cuboid> recipe_parts(const ShapeRecipe& r, std::size_t d) {
  for (double f : {r.width, r.depth, r.height, r.floor, r.slab, r.leg, r.back, r.back_thickness}) {
    if (!(f >= 0.0 && f <= 1.0)) throw Error("shape recipe fractions must lie in [0,1]");
  }
  const long x0 = to_voxel(0.5 - r.width / 2, d), x1 = to_voxel(0.5 + r.width / 2, d);
  const long z0 = to_voxel(0.5 - r.depth / 2, d), z1 = to_voxel(0.5 + r.depth / 2, d);
  const long yf = to_voxel(r.floor, d);
  const long ytop = to_voxel(r.floor + r.height, d);
  std::vector<Cuboid> parts;
  if (r.category == Category::Box) {
    parts.push_back(make_part("box", x0, x1, yf, ytop, z0, z1, d));
    return parts;
  }
  const long slab = to_voxel(r.slab, d), leg = to_voxel(r.leg, d);
  parts.push_back(make_part("top", x0, x1, ytop - slab, ytop, z0, z1, d));
  for (int i = 0; i < 4; ++i) {
    const long lx = (i & 1) ? x1 - leg : x0;
    const long lz = (i & 2) ? z1 - leg : z0;
    parts.push_back(make_part("leg", lx, lx + leg, yf, ytop - slab, lz, lz + leg, d));
  }
  if (r.category == Category::Chair) {
    const long bt = to_voxel(r.back_thickness, d);
    parts.push_back(make_part("back", x0, x1, ytop, ytop + to_voxel(r.back, d), z1 - bt, z1, d));
  }
  return parts;
}

VoxelGrid generate_shape(const ShapeRecipe& recipe, std::size_t d) {
  VoxelGrid g(d);
  for (const Cuboid& c : recipe_parts(recipe, d)) {
    for (std::size_t x = c.lo[0]; x < c.hi[0]; ++x)
      for (std::size_t y = c.lo[1]; y < c.hi[1]; ++y)
        for (std::size_t z = c.lo[2]; z < c.hi[2]; ++z) g.at(x, y, z) = 1.0;
  }
  return g;
}

ShapeRecipe sample_recipe(Category category, Rng& rng) {
  ShapeRecipe r;
  r.category = category;
  r.seed = rng.next();
  Rng p(r.seed);
  switch (category) {
    case Category::Box:
      r.width = p.uniform(0.3, 0.7);
      r.depth = p.uniform(0.3, 0.7);
      r.height = p.uniform(0.3, 0.7);
      r.floor = p.uniform(0.1, 0.2);
      break;
    case Category::Table:
      r.width = p.uniform(0.6, 0.85);
      r.depth = p.uniform(0.5, 0.8);
      r.height = p.uniform(0.4, 0.6);
      r.floor = p.uniform(0.05, 0.15);
      r.slab = p.uniform(0.125, 0.19);
      r.leg = p.uniform(0.125, 0.19);
      break;
    case Category::Chair:
      r.width = p.uniform(0.5, 0.7);
      r.depth = p.uniform(0.45, 0.65);
      r.height = p.uniform(0.35, 0.5);
      r.floor = p.uniform(0.05, 0.15);
      r.slab = p.uniform(0.125, 0.19);
      r.leg = p.uniform(0.125, 0.19);
      r.back = p.uniform(0.2, 0.35);
      r.back_thickness = p.uniform(0.125, 0.19);
      break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rendering and styles

std::string to_string(Domain d) { return d == Domain::Synth ? "synth" : "real"; }

ImageSample render_view(const VoxelGrid& grid, double azimuth, std::size_t size) {
  const std::size_t d = grid.size;
  ImageSample out;
  out.domain = Domain::Synth;
  out.azimuth = azimuth;
  out.pixels = Tensor({1, size, size}, 0.0);
  if (d == 0 || size == 0) return out;

  // For each view-space (x, z), the source (x, z) under the inverse rotation.
  const double theta = azimuth * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double mid = (static_cast<double>(d) - 1.0) / 2.0;
  const long n = static_cast<long>(d);
  std::vector<long> src(d * d, -1);
  for (std::size_t x = 0; x < d; ++x) {
    for (std::size_t z = 0; z < d; ++z) {
      const double dx = static_cast<double>(x) - mid, dz = static_cast<double>(z) - mid;
      const long sx = static_cast<long>(std::floor(mid + c * dx - s * dz + 0.5));
      const long sz = static_cast<long>(std::floor(mid + s * dx + c * dz + 0.5));
      if (sx >= 0 && sx < n && sz >= 0 && sz < n) src[x * d + z] = sx * n + sz;
    }
  }
  for (std::size_t row = 0; row < size; ++row) {
    const std::size_t y = d - 1 - row * d / size;
    for (std::size_t col = 0; col < size; ++col) {
      const std::size_t x = col * d / size;
      for (std::size_t z = 0; z < d; ++z) {
        const long sxz = src[x * d + z];
        if (sxz < 0) continue;
        const auto sx = static_cast<std::size_t>(sxz / n), sz = static_cast<std::size_t>(sxz % n);
        if (grid.at(sx, y, sz) > 0.5) {
          out.pixels[row * size + col] = 1.0 - static_cast<double>(z) / static_cast<double>(d);
          break;
        }
      }
    }
  }
  return out;
}

namespace {

constexpr double kDepthJump = 0.1;

struct ImageView {
  std::size_t h, w;
  const Tensor& t;
  [[nodiscard]] double get(long r, long c) const {
    if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) return 0.0;
    return t[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  }
};

ImageView view_of(const Tensor& t) {
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t};
  if (t.rank() == 2) return {t.dim(0), t.dim(1), t};
  throw ShapeError("expected a [1,H,W] or [H,W] image, got " + shape_to_string(t.shape()));
}

constexpr int kN4[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};

}  // namespace

double edge_density(const Tensor& image) {
  const ImageView v = view_of(image);
  std::size_t nonzero = 0, edge = 0;
  for (long r = 0; r < static_cast<long>(v.h); ++r) {
    for (long c = 0; c < static_cast<long>(v.w); ++c) {
      if (v.get(r, c) <= 0.0) continue;
      ++nonzero;
      for (const auto& o : kN4) {
        if (v.get(r + o[0], c + o[1]) <= 0.0) {
          ++edge;
          break;
        }
      }
    }
  }
  return nonzero ? static_cast<double>(edge) / static_cast<double>(nonzero) : 0.0;
}

ImageSample stylize(const ImageSample& image, Domain style, std::uint64_t seed) {
  ImageSample out = image;
  out.domain = style;
  if (style == Domain::Synth) return out;

  const ImageView v = view_of(image.pixels);
  const long h = static_cast<long>(v.h), w = static_cast<long>(v.w);
  std::vector<char> edge(v.h * v.w, 0);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      const double p = v.get(r, c);
      if (p <= 0.0) continue;
      for (const auto& o : kN4) {
        const double q = v.get(r + o[0], c + o[1]);
        if (q <= 0.0 || q - p > kDepthJump) {
          edge[static_cast<std::size_t>(r * w + c)] = 1;
          break;
        }
      }
    }
  }

  Rng rng(mix_seed(seed, 0x57e7c4));
  Tensor& px = out.pixels;
  px.fill(0.0);
  std::vector<char> seen(edge.size(), 0);
  std::vector<std::pair<long, long>> stack, stroke;
  for (long r0 = 0; r0 < h; ++r0) {
    for (long c0 = 0; c0 < w; ++c0) {
      const auto i0 = static_cast<std::size_t>(r0 * w + c0);
      if (!edge[i0] || seen[i0]) continue;
      // 8-connected stroke containing (r0, c0), in scan order.
      stroke.clear();
      stack.assign(1, {r0, c0});
      seen[i0] = 1;
      while (!stack.empty()) {
        const auto [r, c] = stack.back();
        stack.pop_back();
        stroke.emplace_back(r, c);
        for (long dr = -1; dr <= 1; ++dr) {
          for (long dc = -1; dc <= 1; ++dc) {
            const long rr = r + dr, cc = c + dc;
            if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
            const auto j = static_cast<std::size_t>(rr * w + cc);
            if (edge[j] && !seen[j]) {
              seen[j] = 1;
              stack.emplace_back(rr, cc);
            }
          }
        }
      }
      std::sort(stroke.begin(), stroke.end());
      const long jr = static_cast<long>(rng.below(3)) - 1;
      const long jc = static_cast<long>(rng.below(3)) - 1;
      const double ink = rng.uniform(0.75, 1.0);
      auto put = [&](long r, long c) {
        if (r < 0 || c < 0 || r >= h || c >= w) return;
        const double val = std::clamp(ink + 0.08 * rng.normal(), 0.0, 1.0);
        auto& dst = px[static_cast<std::size_t>(r * w + c)];
        dst = std::max(dst, val);
      };
      for (const auto& [r, c] : stroke) {
        if (rng.uniform() < 0.1) continue;
        put(r + jr, c + jc);
        if (rng.uniform() < 0.15) {
          const auto& o = kN4[rng.below(4)];
          put(r + jr + o[0], c + jc + o[1]);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

void DatasetConfig::validate() const {
  if (shapes < 2) throw Error("dataset needs at least 2 shapes");
  if (views < 1) throw Error("dataset needs at least 1 view");
  if (voxel_size < 4) throw Error("voxel size must be at least 4");
  if (image_size < 4) throw Error("image size must be at least 4");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("train fraction must lie in (0,1)");
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(shapes) * train_fraction + 0.5));
  if (n_train == 0 || n_train >= shapes) {
    throw Error("degenerate split: " + std::to_string(n_train) + " of " + std::to_string(shapes) + " shapes for training");
  }
}

namespace {

std::vector<ShapeRecipe> sample_recipes(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ShapeRecipe> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto cat = static_cast<Category>(rng.below(3));
    out.push_back(sample_recipe(cat, rng));
  }
  return out;
}

std::uint64_t real_style_seed(std::uint64_t seed, std::uint64_t stream, std::size_t item) {
  return mix_seed(mix_seed(seed, stream), item);
}

}  // namespace

Dataset Dataset::build(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config_ = config;
  const std::size_t d = config.voxel_size;

  const auto recipes = sample_recipes(config.shapes, mix_seed(config.seed, 1));
  std::vector<std::size_t> order(config.shapes);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split(mix_seed(config.seed, 3));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(config.shapes) * config.train_fraction + 0.5));
  std::vector<char> is_train(config.shapes, 0);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = 1;

  for (std::size_t s = 0; s < config.shapes; ++s) {
    ShapeItem item{s, recipes[s], generate_shape(recipes[s], d), is_train[s] != 0};
    ds.shapes_.push_back(std::move(item));
  }
  for (const auto& shape : ds.shapes_) {
    for (std::size_t v = 0; v < config.views; ++v) {
      ImageSample img = render_view(shape.grid, ds.view_azimuth(v), config.image_size);
      img.id = ds.synth_.size();
      img.shape_id = shape.id;
      if (shape.train) ds.train_items_.push_back(img.id);
      ds.synth_.push_back(std::move(img));
    }
  }

  const std::size_t aux = config.real_shapes ? config.real_shapes : config.shapes;
  const auto aux_recipes = sample_recipes(aux, mix_seed(config.seed, 2));
  for (std::size_t s = 0; s < aux; ++s) {
    const VoxelGrid g = generate_shape(aux_recipes[s], d);
    for (std::size_t v = 0; v < config.views; ++v) {
      const std::size_t id = ds.real_pool_.size();
      ImageSample img = stylize(render_view(g, ds.view_azimuth(v), config.image_size), Domain::Real,
                                real_style_seed(config.seed, 4, id));
      img.id = id;
      img.shape_id.reset();
      ds.real_pool_.push_back(std::move(img));
    }
  }
  return ds;
}

std::vector<std::size_t> Dataset::train_shapes() const {
  std::vector<std::size_t> out;
  for (const auto& s : shapes_) {
    if (s.train) out.push_back(s.id);
  }
  return out;
}

std::vector<std::size_t> Dataset::test_shapes() const {
  std::vector<std::size_t> out;
  for (const auto& s : shapes_) {
    if (!s.train) out.push_back(s.id);
  }
  return out;
}

double Dataset::view_azimuth(std::size_t view) const {
  return 360.0 * static_cast<double>(view) / static_cast<double>(config_.views);
}

const ImageSample& Dataset::synth_item(std::size_t shape, std::size_t view) const {
  if (shape >= shapes_.size() || view >= config_.views) throw Error("synth item out of range");
  return synth_[shape * config_.views + view];
}

ImageSample Dataset::real_render(std::size_t shape, std::size_t view) const {
  const ImageSample& src = synth_item(shape, view);
  ImageSample img = stylize(src, Domain::Real, real_style_seed(config_.seed, 5, src.id));
  img.id = src.id;
  img.shape_id = shape;
  return img;
}

Tensor stack_images(const std::vector<const ImageSample*>& items) {
  if (items.empty()) throw ShapeError("cannot stack an empty image list");
  std::vector<Tensor> parts;
  parts.reserve(items.size());
  for (const auto* it : items) {
    Shape s{1};
    s.insert(s.end(), it->pixels.shape().begin(), it->pixels.shape().end());
    parts.push_back(it->pixels.reshaped(s));
  }
  return concat_batch(parts);
}

Batch Dataset::make_batch(const std::vector<std::size_t>& w_ids, const std::vector<std::size_t>& w_v_ids,
                          WSource source) const {
  if (w_ids.empty() || w_ids.size() != w_v_ids.size()) throw Error("batch needs equally many w and w_V items");
  Batch b;
  std::vector<const ImageSample*> ws, wvs;
  std::vector<const VoxelGrid*> grids;
  for (auto id : w_ids) {
    const auto& pool = source == WSource::Real ? real_pool_ : synth_;
    if (id >= pool.size()) throw Error("w item " + std::to_string(id) + " out of range");
    const ImageSample& item = pool[id];
    // Unpaired discipline: a REAL image never reaches a batch with a voxel link.
    if (item.domain == Domain::Real && item.shape_id) throw Error("REAL item carries a voxel link");
    ws.push_back(&item);
    b.w_ids.push_back(id);
  }
  for (auto id : w_v_ids) {
    if (id >= synth_.size()) throw Error("w_V item " + std::to_string(id) + " out of range");
    const ImageSample& item = synth_[id];
    if (item.domain != Domain::Synth || !item.shape_id) throw Error("w_V item lacks a voxel link");
    wvs.push_back(&item);
    grids.push_back(&shapes_.at(*item.shape_id).grid);
    b.w_v_ids.push_back(id);
    b.shape_ids.push_back(*item.shape_id);
  }
  b.w = stack_images(ws);
  b.w_v = stack_images(wvs);
  b.v_w = stack_grids(grids);
  return b;
}

Batch Dataset::sample_batch(std::uint64_t seed, std::uint64_t step, std::size_t n, WSource source) const {
  if (n == 0) throw Error("batch size must be positive");
  const std::uint64_t base = mix_seed(seed, step);
  Rng rw(mix_seed(base, 1)), rv(mix_seed(base, 2));
  std::vector<std::size_t> w_ids, w_v_ids;
  for (std::size_t i = 0; i < n; ++i) {
    w_ids.push_back(source == WSource::Real ? rw.below(real_pool_.size()) : train_items_[rw.below(train_items_.size())]);
  }
  for (std::size_t i = 0; i < n; ++i) w_v_ids.push_back(train_items_[rv.below(train_items_.size())]);
  return make_batch(w_ids, w_v_ids, source);
}

}  // namespace voxadapt
