#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxadapt/io.hpp"
#include "voxadapt/training.hpp"

namespace voxadapt {

inline constexpr double kDefaultIoUThreshold = 0.3;

/// |{p > t} ∩ {y = 1}| / |{p > t} ∪ {y = 1}|, and 1 when both sets are empty.
double compute_iou(const VoxelGrid& prediction, const VoxelGrid& truth, double t = kDefaultIoUThreshold);

struct AlignmentGrid {
  int max_shift = 2;  ///< integer shifts -max_shift..max_shift on each axis
  std::vector<double> scales{0.75, 1.0, 1.25};
  void validate() const;
};

/// Prediction resampled about the grid centre: out[p] = in[c + (p - c - shift) / scale]
/// with nearest-voxel rounding and zero outside.
VoxelGrid transform_grid(const VoxelGrid& grid, const std::array<int, 3>& shift, double scale);

/// Largest IoU over every shift and scale of the prediction.
double compute_iou_aligned(const VoxelGrid& prediction, const VoxelGrid& truth, double t = kDefaultIoUThreshold,
                           const AlignmentGrid& grid = {});

struct IoUResult {
  std::vector<std::size_t> item_ids;
  std::vector<double> items;
  std::map<std::string, double> category_mean;
  double mean = 0.0;
  double threshold = kDefaultIoUThreshold;
};

/// Per-item IoU (aligned when `alignment` is set) with per-category means.
IoUResult summarize_iou(const std::vector<VoxelGrid>& predictions, const std::vector<VoxelGrid>& truths,
                        const std::vector<std::size_t>& item_ids, const std::vector<Category>& categories,
                        double t = kDefaultIoUThreshold, const std::optional<AlignmentGrid>& alignment = {});

/// Model inference in batches of at most `chunk` images.
Tensor encode_samples(const Trainer& trainer, const TrainState& state, const std::vector<ImageSample>& samples,
                      std::size_t chunk = 64);
std::vector<VoxelGrid> predict_samples(const Trainer& trainer, const TrainState& state,
                                       const std::vector<ImageSample>& samples, std::size_t chunk = 64);

/// Scores predictions for linked samples against their shapes.
IoUResult evaluate_samples(const Trainer& trainer, const TrainState& state, const Dataset& data,
                           const std::vector<ImageSample>& samples, double t = kDefaultIoUThreshold,
                           const std::optional<AlignmentGrid>& alignment = {});

/// REAL-style renders of every view of the held-out shapes.
std::vector<ImageSample> held_out_real(const Dataset& data);

struct Neighbor {
  std::size_t id = 0;
  double distance = 0.0;
};

struct RetrievalResult {
  std::size_t query_id = 0;
  std::vector<Neighbor> neighbors;  ///< ascending distance, ties by ascending id
};

/// Top-k pool rows of `pool_latents` [P, n] by L2 distance to `query`.
RetrievalResult rank_latents(std::size_t query_id, const std::vector<double>& query, const Tensor& pool_latents,
                             const std::vector<std::size_t>& pool_ids, std::size_t k);

RetrievalResult retrieve_nearest(const Trainer& trainer, const TrainState& state, const ImageSample& query,
                                 const std::vector<ImageSample>& pool, std::size_t k);

struct RetrievalScore {
  std::size_t hits = 0;
  std::size_t queries = 0;
  std::size_t pool_size = 0;
  std::size_t k = 1;
  [[nodiscard]] double rate() const { return queries ? static_cast<double>(hits) / static_cast<double>(queries) : 0.0; }
  [[nodiscard]] double chance() const {
    return pool_size ? std::min(1.0, static_cast<double>(k) / static_cast<double>(pool_size)) : 0.0;
  }
};

/// Every train-shape SYNTH render queried against that same pool; a hit is a
/// rank-1 neighbour that is the query or a pixel-identical render.
RetrievalScore self_retrieval(const Trainer& trainer, const TrainState& state, const Dataset& data);

/// REAL renders of train shapes queried against the train-shape SYNTH renders
/// of the same view; a hit has the source shape among the top k.
RetrievalScore cross_domain_retrieval(const Trainer& trainer, const TrainState& state, const Dataset& data,
                                      std::size_t k = 5);

struct SweepRow {
  double phi2 = 0.0;
  double real_l1 = 0.0;    ///< reconstruction L1 on held-out REAL renders
  double synth_l1 = 0.0;   ///< reconstruction L1 on held-out SYNTH renders
  double confusion = 0.0;  ///< mean |avg G2(REAL) - avg G2(SYNTH)|
  bool operator==(const SweepRow&) const = default;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  Tensor panel;  ///< [1, (1 + values) * H, items * W]: inputs, then one row of outputs per value
};

/// Trains stage 1 once per value from the same seed and scores each model.
SweepReport phi2_sweep(const std::vector<double>& values, const TrainConfig& base, const Dataset& data,
                       std::size_t panel_items = 8);

/// sweep.csv and sweep_panel.pgm.
void write_sweep(const std::filesystem::path& dir, const SweepReport& report);

/// Per item: input and G2 output images, predicted voxels and (when linked)
/// truth voxels as "item{id}_{kind}.{ext}", plus manifest.csv.
std::vector<ManifestRow> export_outputs(const Trainer& trainer, const TrainState& state, const Dataset& data,
                                        const std::vector<ImageSample>& items, const std::filesystem::path& dir);

}  // namespace voxadapt
