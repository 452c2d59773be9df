#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxadapt/cli.hpp"
#include "voxadapt/eval.hpp"

using namespace voxadapt;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli_main(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "voxadapt_test_cli" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
    ++n;
  }
  return n > 0;
}

const std::vector<std::string> kTiny{"--shapes", "6",        "--views",  "4", "--steps1",     "2", "--steps2",
                                     "1",        "--steps3", "1",        "--batch-size", "2", "--seed", "3"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

/// Trains the tiny model once and returns its output directory.
const fs::path& tiny_model() {
  static const fs::path dir = [] {
    fs::path d = scratch("model");
    const Run r = run(with({"train", "--out", d.string()}, kTiny));
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == 2);
  const Run unknown = run({"frobnicate"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("unknown subcommand 'frobnicate'") != std::string::npos);
  CHECK(run({"gen-data"}).code == 2);
  CHECK(run({"train", "--out", "x", "--steps1", "abc"}).code == 2);
  CHECK(run({"eval", "--bogus"}).code == 2);
  const Run help = run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("gen-data") != std::string::npos);
}

TEST_CASE("runtime errors exit with code 1") {
  const fs::path cfg = scratch("cfg") / "bad.cfg";
  fs::create_directories(cfg.parent_path());
  std::ofstream(cfg) << "shapes = 6\nnot_a_key = 1\n";
  const Run r = run({"gen-data", "--out", scratch("bad").string(), "--config", cfg.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("unknown config key 'not_a_key'") != std::string::npos);

  CHECK(run({"gen-data", "--out", scratch("bad2").string(), "--shapes", "0"}).code == 1);
  CHECK(run({"eval", "--pred", "/nonexistent", "--truth", "/nonexistent"}).code == 1);
  CHECK(run({"eval"}).code != 0);
  CHECK(run(with({"train", "--out", scratch("bad3").string(), "--w-source", "paint"}, kTiny)).code == 1);
}

TEST_CASE("gen-data is deterministic") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const std::vector<std::string> flags{"--shapes", "6", "--views", "4", "--seed", "12"};
  REQUIRE(run(with({"gen-data", "--out", a.string()}, flags)).code == 0);
  REQUIRE(run(with({"gen-data", "--out", b.string()}, flags)).code == 0);
  CHECK(fs::exists(a / "dataset.cfg"));
  CHECK(same_tree(a, b));
  CHECK(same_tree(b, a));
  DatasetConfig c;
  c.shapes = 6;
  c.views = 4;
  c.seed = 12;
  CHECK(load_dataset(a).config() == c);
}

TEST_CASE("train writes logs and checkpoints reproducibly") {
  const fs::path& a = tiny_model();
  const fs::path b = scratch("model_b");
  REQUIRE(run(with({"train", "--out", b.string()}, kTiny)).code == 0);
  for (const char* f : {"train.cfg", "log.csv", "final.ckpt"}) {
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  std::istringstream log(slurp(a / "log.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1 + 4);
}

TEST_CASE("train resumes to the same final state") {
  const fs::path half = scratch("half"), rest = scratch("rest");
  REQUIRE(run(with({"train", "--out", half.string(), "--stop-after", "2"}, kTiny)).code == 0);
  REQUIRE(fs::exists(half / "final.ckpt"));
  const Run r = run(with({"train", "--out", rest.string(), "--resume", (half / "final.ckpt").string()}, kTiny));
  REQUIRE(r.code == 0);
  CHECK(slurp(rest / "final.ckpt") == slurp(tiny_model() / "final.ckpt"));
}

TEST_CASE("eval scores prediction directories") {
  const fs::path pred = scratch("pred"), truth = scratch("truth");
  fs::create_directories(pred);
  fs::create_directories(truth);
  VoxelGrid y(4), p(4);
  y.at(0, 0, 0) = y.at(0, 0, 1) = 1.0;
  p.at(0, 0, 1) = p.at(0, 0, 2) = 0.9;
  write_voxel(pred / "a_pred.vox", p);
  write_voxel(truth / "a_truth.vox", y);
  write_voxel(pred / "b_pred.vox", y);
  write_voxel(truth / "b_truth.vox", y);
  const Run r = run({"eval", "--pred", pred.string(), "--truth", truth.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("item,iou\n") == 0);
  CHECK(r.out.find("b,1\n") != std::string::npos);
  CHECK(r.out.find("mean," + format_double((1.0 / 3.0 + 1.0) / 2.0)) != std::string::npos);

  const Run strict = run({"eval", "--pred", pred.string(), "--truth", truth.string(), "--t", "0.95"});
  REQUIRE(strict.code == 0);
  CHECK(strict.out.find("a,0\n") != std::string::npos);

  fs::remove(truth / "b_truth.vox");
  const Run missing = run({"eval", "--pred", pred.string(), "--truth", truth.string()});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("'b'") != std::string::npos);
}

TEST_CASE("eval, export and retrieve on a trained checkpoint") {
  const fs::path ckpt = tiny_model() / "final.ckpt";
  const Run e1 = run(with({"eval", "--checkpoint", ckpt.string(), "--aligned"}, kTiny));
  const Run e2 = run(with({"eval", "--checkpoint", ckpt.string(), "--aligned"}, kTiny));
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(e1.out.find("item,shape,category,iou\n") == 0);

  const fs::path ex = scratch("export");
  REQUIRE(run(with({"export", "--checkpoint", ckpt.string(), "--out", ex.string()}, kTiny)).code == 0);
  CHECK(fs::exists(ex / "manifest.csv"));
  const Run scored = run({"eval", "--pred", ex.string(), "--truth", ex.string()});
  REQUIRE(scored.code == 0);
  CHECK(scored.out.find("mean,") != std::string::npos);

  const Run q = run(with({"retrieve", "--checkpoint", ckpt.string(), "--query", "1", "--domain", "synth", "--k", "3"},
                         kTiny));
  REQUIRE(q.code == 0);
  CHECK(q.out == run(with({"retrieve", "--checkpoint", ckpt.string(), "--query", "1", "--domain", "synth", "--k", "3"},
                          kTiny)).out);

  const Run s = run(with({"retrieve", "--checkpoint", ckpt.string(), "--score"}, kTiny));
  REQUIRE(s.code == 0);
  CHECK(s.out.find("self_top1") != std::string::npos);
  CHECK(s.out.find("cross_top") != std::string::npos);

  const Run wrong = run(with({"eval", "--checkpoint", ckpt.string(), "--preset", "full"}, kTiny));
  CHECK(wrong.code == 1);
}

TEST_CASE("sweep-phi2 writes its report") {
  const fs::path dir = scratch("sweep");
  const Run r = run(with({"sweep-phi2", "--out", dir.string(), "--values", "0.3,0.9", "--panel-items", "2"}, kTiny));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "sweep.csv"));
  CHECK(fs::exists(dir / "sweep_panel.pgm"));
  const fs::path again = scratch("sweep2");
  REQUIRE(run(with({"sweep-phi2", "--out", again.string(), "--values", "0.3,0.9", "--panel-items", "2"}, kTiny))
              .code == 0);
  CHECK(same_tree(dir, again));
}

TEST_CASE("training config maps round trip") {
  TrainConfig c;
  c.batch_size = 5;
  c.loss.phi2 = 0.25;
  c.w_source = WSource::Synth;
  c.literal_s_update = true;
  const TrainConfig back = train_config_from_map(train_config_map(c));
  CHECK(train_config_map(back) == train_config_map(c));
  CHECK_THROWS_AS(train_config_from_map({{"phi9", "1"}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_map({{"phi2", "2"}}), Error);
  CHECK_THROWS_AS(train_config_from_map({{"batch_size", "-1"}}), Error);
  CHECK_THROWS_AS(train_config_from_map({{"literal_s_update", "maybe"}}), Error);
}
