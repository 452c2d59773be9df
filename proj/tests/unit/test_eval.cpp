#include <doctest.h>

#include <filesystem>

#include "support/oracles.hpp"
#include "voxadapt/eval.hpp"
#include "voxadapt/io.hpp"

using namespace voxadapt;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "voxadapt_test_eval" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

const Dataset& small_data() {
  static const Dataset data = [] {
    DatasetConfig c;
    c.shapes = 6;
    c.views = 4;
    c.seed = 9;
    return Dataset::build(c);
  }();
  return data;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch_size = 2;
  c.steps1 = 3;
  c.steps2 = 2;
  c.steps3 = 1;
  c.seed = 4;
  return c;
}

VoxelGrid grid_with(std::size_t d, std::initializer_list<std::array<std::size_t, 3>> cells) {
  VoxelGrid g(d);
  for (const auto& c : cells) g.at(c[0], c[1], c[2]) = 1.0;
  return g;
}

}  // namespace

TEST_CASE("iou on small examples") {
  const VoxelGrid a = grid_with(4, {{0, 0, 0}, {0, 0, 1}});
  const VoxelGrid b = grid_with(4, {{0, 0, 1}, {0, 0, 2}});
  const VoxelGrid c = grid_with(4, {{3, 3, 3}});
  CHECK(compute_iou(a, a) == 1.0);
  CHECK(compute_iou(a, c) == 0.0);
  CHECK(compute_iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(compute_iou(VoxelGrid(4), VoxelGrid(4)) == 1.0);

  VoxelGrid soft(4, 0.0);
  soft.at(0, 0, 0) = 0.3;
  soft.at(0, 0, 1) = 0.31;
  CHECK(compute_iou(soft, a) == doctest::Approx(0.5));
  CHECK(compute_iou(soft, a, 0.2) == 1.0);
}

TEST_CASE("iou matches the set-enumeration oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    VoxelGrid p(4), y(4);
    for (auto& v : p.values) v = rng.uniform(0.0, 1.0);
    for (auto& v : y.values) v = rng.uniform(0.0, 1.0) < 0.3 ? 1.0 : 0.0;
    const double t = rng.uniform(0.05, 0.95);
    CHECK(compute_iou(p, y, t) == doctest::Approx(testing::enumerate_iou(p.values, y.values, t)).epsilon(1e-12));
  }
}

TEST_CASE("iou input validation") {
  CHECK_THROWS_AS(compute_iou(VoxelGrid(4), VoxelGrid(8)), ShapeError);
  CHECK_THROWS_AS(compute_iou(VoxelGrid(4), VoxelGrid(4), 0.0), Error);
  CHECK_THROWS_AS(compute_iou(VoxelGrid(4), VoxelGrid(4), 1.0), Error);
  CHECK_THROWS_AS(compute_iou(VoxelGrid(4), VoxelGrid(4, 0.5)), Error);
  AlignmentGrid bad;
  bad.scales = {};
  CHECK_THROWS(bad.validate());
  bad.scales = {-1.0};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("grid transforms and aligned iou") {
  const VoxelGrid a = grid_with(8, {{2, 3, 4}, {3, 3, 4}});
  CHECK(transform_grid(a, {0, 0, 0}, 1.0) == a);
  const VoxelGrid moved = transform_grid(a, {1, -1, 2}, 1.0);
  CHECK(moved == grid_with(8, {{3, 2, 6}, {4, 2, 6}}));

  CHECK(compute_iou(moved, a) == 0.0);
  CHECK(compute_iou_aligned(moved, a) == 1.0);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    VoxelGrid p(6), y(6);
    for (auto& v : p.values) v = rng.uniform(0.0, 1.0);
    for (auto& v : y.values) v = rng.uniform(0.0, 1.0) < 0.2 ? 1.0 : 0.0;
    CHECK(compute_iou_aligned(p, y) >= compute_iou(p, y));
  }
}

TEST_CASE("iou summary keeps per-category means") {
  const VoxelGrid full(4, 1.0), empty(4, 0.0);
  const IoUResult r = summarize_iou({full, empty, full}, {full, full, full}, {7, 8, 9},
                                    {Category::Chair, Category::Chair, Category::Table});
  REQUIRE(r.items.size() == 3);
  CHECK(r.item_ids == std::vector<std::size_t>{7, 8, 9});
  CHECK(r.mean == doctest::Approx(2.0 / 3.0));
  CHECK(r.category_mean.at(to_string(Category::Chair)) == doctest::Approx(0.5));
  CHECK(r.category_mean.at(to_string(Category::Table)) == 1.0);
  CHECK_THROWS(summarize_iou({full}, {full, full}, {1, 2}, {Category::Chair, Category::Chair}));
}

TEST_CASE("latent ranking orders by distance then id") {
  const Tensor pool({4, 2}, std::vector<double>{3, 4, 0, 1, 0, 0, 0, -1});
  const RetrievalResult r = rank_latents(99, {0.0, 0.0}, pool, {10, 11, 12, 13}, 3);
  REQUIRE(r.neighbors.size() == 3);
  CHECK(r.query_id == 99);
  CHECK(r.neighbors[0].id == 12);
  CHECK(r.neighbors[0].distance == 0.0);
  CHECK(r.neighbors[1].id == 11);
  CHECK(r.neighbors[2].id == 13);
  CHECK(r.neighbors[2].distance == 1.0);

  CHECK(rank_latents(0, {0.0, 0.0}, pool, {10, 11, 12, 13}, 50).neighbors.size() == 4);
  CHECK_THROWS(rank_latents(0, {0.0, 0.0}, pool, {10, 11, 12, 13}, 0));
  CHECK_THROWS(rank_latents(0, {0.0}, pool, {10, 11, 12, 13}, 1));
  CHECK_THROWS(rank_latents(0, {}, Tensor({0, 0}), {}, 1));
}

TEST_CASE("retrieval on a model") {
  const Dataset& data = small_data();
  const Trainer trainer(tiny_config());
  const TrainState state = run_schedule(trainer, data);

  const RetrievalScore self = self_retrieval(trainer, state, data);
  CHECK(self.queries == data.train_shapes().size() * data.config().views);
  CHECK(self.pool_size == self.queries);
  CHECK(self.rate() == 1.0);

  const RetrievalScore cross = cross_domain_retrieval(trainer, state, data, 100);
  CHECK(cross.queries == self.queries);
  CHECK(cross.pool_size == data.train_shapes().size());
  CHECK(cross.chance() == 1.0);
  CHECK(cross.rate() == 1.0);

  const ImageSample& q = data.synth_item(data.train_shapes()[0], 1);
  std::vector<ImageSample> pool;
  for (std::size_t s : data.train_shapes()) pool.push_back(data.synth_item(s, 1));
  const RetrievalResult r = retrieve_nearest(trainer, state, q, pool, 2);
  REQUIRE(r.neighbors.size() == 2);
  CHECK(r.neighbors[0].id == q.id);
  CHECK(r.neighbors[0].distance < 1e-9);
  CHECK_THROWS(retrieve_nearest(trainer, state, q, {}, 2));
}

TEST_CASE("held-out evaluation covers every view of the test shapes") {
  const Dataset& data = small_data();
  const std::vector<ImageSample> held = held_out_real(data);
  CHECK(held.size() == data.test_shapes().size() * data.config().views);
  for (const auto& s : held) {
    CHECK(s.domain == Domain::Real);
    REQUIRE(s.shape_id.has_value());
    CHECK_FALSE(data.shapes()[*s.shape_id].train);
  }
  const Trainer trainer(tiny_config());
  const TrainState state = trainer.init();
  const IoUResult plain = evaluate_samples(trainer, state, data, held);
  const IoUResult aligned = evaluate_samples(trainer, state, data, held, kDefaultIoUThreshold, AlignmentGrid{});
  CHECK(plain.items.size() == held.size());
  for (std::size_t i = 0; i < held.size(); ++i) CHECK(aligned.items[i] >= plain.items[i]);

  std::vector<ImageSample> unlinked{data.real_pool()[0]};
  CHECK_THROWS(evaluate_samples(trainer, state, data, unlinked));
}

TEST_CASE("exported outputs reproduce the evaluation") {
  const Dataset& data = small_data();
  const Trainer trainer(tiny_config());
  const TrainState state = run_schedule(trainer, data);
  std::vector<ImageSample> items;
  for (std::size_t s : data.test_shapes()) items.push_back(data.real_render(s, 0));
  const auto dir = scratch("export");
  const std::vector<ManifestRow> rows = export_outputs(trainer, state, data, items, dir);
  CHECK(read_manifest(dir / "manifest.csv") == rows);
  CHECK(rows.size() == items.size() * 4);

  const IoUResult expect = evaluate_samples(trainer, state, data, items);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string stem = "item" + std::to_string(items[i].id);
    const VoxelGrid pred = read_voxel(dir / (stem + "_pred.vox"));
    const VoxelGrid truth = read_voxel(dir / (stem + "_truth.vox"));
    CHECK(truth == data.shapes()[*items[i].shape_id].grid);
    CHECK(compute_iou(pred, truth) == doctest::Approx(expect.items[i]).epsilon(1e-12));
    const Tensor input = read_pgm(dir / (stem + "_input.pgm"));
    CHECK(input.shape() == items[i].pixels.shape());
  }

  std::vector<ImageSample> dup{items[0], items[0]};
  CHECK_THROWS(export_outputs(trainer, state, data, dup, scratch("dup")));
}

TEST_CASE("phi2 sweep is deterministic and shaped") {
  const Dataset& data = small_data();
  TrainConfig base = tiny_config();
  base.steps1 = 4;
  const SweepReport a = phi2_sweep({0.3, 0.9}, base, data, 3);
  const SweepReport b = phi2_sweep({0.3, 0.9}, base, data, 3);
  REQUIRE(a.rows.size() == 2);
  CHECK(a.rows == b.rows);
  CHECK(a.panel == b.panel);
  const std::size_t h = data.config().image_size;
  CHECK(a.panel.shape() == Shape{1, 3 * h, 3 * h});
  for (const auto& r : a.rows) {
    CHECK(r.real_l1 >= 0.0);
    CHECK(r.synth_l1 >= 0.0);
    CHECK(r.confusion >= 0.0);
  }
  const SweepReport single = phi2_sweep({0.3}, base, data, 3);
  CHECK(single.rows.front() == a.rows.front());

  CHECK_THROWS(phi2_sweep({}, base, data));
  CHECK_THROWS(phi2_sweep({1.5}, base, data));

  const auto dir = scratch("sweep");
  write_sweep(dir, a);
  CHECK(std::filesystem::exists(dir / "sweep.csv"));
  CHECK(read_pgm(dir / "sweep_panel.pgm").shape() == a.panel.shape());
}
