#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxadapt/rng.hpp"
#include "voxadapt/tensor.hpp"

namespace voxadapt {

/// D^3 occupancy field; voxel (x, y, z) lives at ((x * D) + y) * D + z and
/// y is the vertical axis.
struct VoxelGrid {
  std::size_t size = 0;
  std::vector<double> values;

  VoxelGrid() = default;
  explicit VoxelGrid(std::size_t d, double fill = 0.0) : size(d), values(d * d * d, fill) {}

  [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (x * size + y) * size + z; }
  [[nodiscard]] double& at(std::size_t x, std::size_t y, std::size_t z) { return values[index(x, y, z)]; }
  [[nodiscard]] double at(std::size_t x, std::size_t y, std::size_t z) const { return values[index(x, y, z)]; }
  [[nodiscard]] std::size_t occupied(double t = 0.5) const;
  [[nodiscard]] bool binary() const;

  /// [1, D, D, D] tensor view of the grid.
  [[nodiscard]] Tensor to_tensor() const;
  static VoxelGrid from_tensor(const Tensor& t);

  bool operator==(const VoxelGrid&) const = default;
};

/// [N, 1, D, D, D] batch.
Tensor stack_grids(const std::vector<const VoxelGrid*>& grids);
/// Row `i` of an [N, 1, D, D, D] batch.
VoxelGrid grid_from_batch(const Tensor& batch, std::size_t i);

enum class Category { Chair, Table, Box };
std::string to_string(Category c);
Category parse_category(const std::string& s);

/// Parametric shape; extents are fractions of the grid size. Parts are
/// centred on the vertical axis and rest on `floor`.
///
/// box:   one cuboid, width x height x depth.
/// table: a top slab whose upper face is at floor + height, plus four legs.
/// chair: a table-like seat plus a back of height `back` and thickness
///        `back_thickness` standing on the far (high z) edge of the seat.
struct ShapeRecipe {
  Category category = Category::Box;
  double width = 0.5;
  double depth = 0.5;
  double height = 0.5;
  double floor = 0.25;
  double slab = 0.125;
  double leg = 0.125;
  double back = 0.25;
  double back_thickness = 0.125;
  std::uint64_t seed = 0;  ///< seed the recipe was sampled from

  bool operator==(const ShapeRecipe&) const = default;
};

/// Half-open voxel box [lo, hi) per axis (x, y, z).
struct Cuboid {
  std::array<std::size_t, 3> lo{};
  std::array<std::size_t, 3> hi{};
  [[nodiscard]] std::size_t volume() const { return (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]); }
};

/// Voxel cuboids of a recipe at resolution `d`. Throws on empty or
/// out-of-grid parts.
std::vector<Cuboid> recipe_parts(const ShapeRecipe& recipe, std::size_t d);
VoxelGrid generate_shape(const ShapeRecipe& recipe, std::size_t d);
/// Random recipe of the given category; parts stay at least two voxels thick
/// at d = 16.
ShapeRecipe sample_recipe(Category category, Rng& rng);

enum class Domain { Synth, Real };
std::string to_string(Domain d);

struct ImageSample {
  std::size_t id = 0;
  Domain domain = Domain::Synth;
  double azimuth = 0.0;                  ///< degrees
  std::optional<std::size_t> shape_id;   ///< pairing link to a voxel grid
  Tensor pixels;                         ///< [1, H, W] in [0, 1]
};

/// Orthographic depth-shaded render: rotate about the vertical axis (nearest
/// voxel), look along +z from z = 0, pixel = 1 - z_hit / D, 0 on a miss.
/// Image row 0 is the top of the grid.
ImageSample render_view(const VoxelGrid& grid, double azimuth, std::size_t size);

/// REAL turns a depth render into a jittered, dilated, speckled stroke map of
/// its silhouette and depth discontinuities. SYNTH returns the image as is.
ImageSample stylize(const ImageSample& image, Domain style, std::uint64_t seed);

/// Fraction of nonzero pixels with a zero (or off-image) 4-neighbour.
double edge_density(const Tensor& image);

struct DatasetConfig {
  std::size_t shapes = 40;
  std::size_t views = 24;
  double train_fraction = 0.7;
  std::size_t voxel_size = 16;
  std::size_t image_size = 16;
  std::size_t real_shapes = 0;  ///< shapes behind the unpaired REAL pool; 0 means `shapes`
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

struct ShapeItem {
  std::size_t id = 0;
  ShapeRecipe recipe;
  VoxelGrid grid;
  bool train = false;
};

/// One training batch: w from the unpaired pool, (w_V, v_w) paired.
struct Batch {
  Tensor w;    ///< [N, 1, H, W]
  Tensor w_v;  ///< [N, 1, H, W]
  Tensor v_w;  ///< [N, 1, D, D, D]
  std::vector<std::size_t> w_ids;
  std::vector<std::size_t> w_v_ids;
  std::vector<std::size_t> shape_ids;  ///< shape of each w_V row
};

enum class WSource { Real, Synth };

class Dataset {
 public:
  /// Pure function of the configuration.
  static Dataset build(const DatasetConfig& config);

  [[nodiscard]] const DatasetConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<ShapeItem>& shapes() const noexcept { return shapes_; }
  /// Paired renders; item id = shape id * views + view index.
  [[nodiscard]] const std::vector<ImageSample>& synth() const noexcept { return synth_; }
  /// Unpaired REAL-style renders of auxiliary shapes; no item carries a link.
  [[nodiscard]] const std::vector<ImageSample>& real_pool() const noexcept { return real_pool_; }

  [[nodiscard]] std::vector<std::size_t> train_shapes() const;
  [[nodiscard]] std::vector<std::size_t> test_shapes() const;
  [[nodiscard]] double view_azimuth(std::size_t view) const;

  [[nodiscard]] const ImageSample& synth_item(std::size_t shape, std::size_t view) const;
  /// REAL-style render of a main shape for evaluation, linked to its shape.
  [[nodiscard]] ImageSample real_render(std::size_t shape, std::size_t view) const;

  /// Random batch for a training step: w uniformly from the REAL pool (or, for
  /// the unadapted baseline, from train-shape SYNTH renders), w_V uniformly
  /// from train-shape SYNTH renders, drawn from independent streams.
  [[nodiscard]] Batch sample_batch(std::uint64_t seed, std::uint64_t step, std::size_t n,
                                   WSource source = WSource::Real) const;
  /// Batch from explicit ids: `w_ids` index the REAL pool (or SYNTH items
  /// when `source` is Synth), `w_v_ids` index SYNTH items.
  [[nodiscard]] Batch make_batch(const std::vector<std::size_t>& w_ids, const std::vector<std::size_t>& w_v_ids,
                                 WSource source = WSource::Real) const;

 private:
  DatasetConfig config_;
  std::vector<ShapeItem> shapes_;
  std::vector<ImageSample> synth_;
  std::vector<ImageSample> real_pool_;
  std::vector<std::size_t> train_items_;  ///< SYNTH ids of train shapes
};

/// [N, 1, H, W] batch of sample pixels.
Tensor stack_images(const std::vector<const ImageSample*>& items);

}  // namespace voxadapt
