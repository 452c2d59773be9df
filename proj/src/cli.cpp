#include "voxadapt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "voxadapt/eval.hpp"

namespace voxadapt {

ConfigMap train_config_map(const TrainConfig& c) {
  return {{"preset", c.preset},
          {"batch_size", std::to_string(c.batch_size)},
          {"lr_g", format_double(c.adam_g.base_rate)},
          {"lr_d", format_double(c.adam_d.base_rate)},
          {"decay_g", format_double(c.adam_g.decay)},
          {"decay_d", format_double(c.adam_d.decay)},
          {"decay_steps_g", std::to_string(c.adam_g.decay_steps)},
          {"decay_steps_d", std::to_string(c.adam_d.decay_steps)},
          {"steps1", std::to_string(c.steps1)},
          {"steps2", std::to_string(c.steps2)},
          {"steps3", std::to_string(c.steps3)},
          {"phi2", format_double(c.loss.phi2)},
          {"phi3", format_double(c.loss.phi3)},
          {"lambda2", format_double(c.lambda2)},
          {"lambda3", format_double(c.lambda3)},
          {"gamma2", format_double(c.gamma2)},
          {"gamma3", format_double(c.gamma3)},
          {"literal_s_update", c.literal_s_update ? "true" : "false"},
          {"w_source", c.w_source == WSource::Real ? "real" : "synth"},
          {"seed", std::to_string(c.seed)},
          {"checkpoint_every", std::to_string(c.checkpoint_every)},
          {"divergence_limit", format_double(c.divergence_limit)}};
}

TrainConfig train_config_from_map(const ConfigMap& m, TrainConfig c) {
  for (const auto& [k, v] : m) {
    const std::string what = "training config key '" + k + "'";
    if (k == "preset") c.preset = v;
    else if (k == "batch_size") c.batch_size = parse_config_uint(v, what);
    else if (k == "lr_g") c.adam_g.base_rate = parse_config_double(v, what);
    else if (k == "lr_d") c.adam_d.base_rate = parse_config_double(v, what);
    else if (k == "decay_g") c.adam_g.decay = parse_config_double(v, what);
    else if (k == "decay_d") c.adam_d.decay = parse_config_double(v, what);
    else if (k == "decay_steps_g") c.adam_g.decay_steps = parse_config_uint(v, what);
    else if (k == "decay_steps_d") c.adam_d.decay_steps = parse_config_uint(v, what);
    else if (k == "steps1") c.steps1 = parse_config_uint(v, what);
    else if (k == "steps2") c.steps2 = parse_config_uint(v, what);
    else if (k == "steps3") c.steps3 = parse_config_uint(v, what);
    else if (k == "phi2") c.loss.phi2 = parse_config_double(v, what);
    else if (k == "phi3") c.loss.phi3 = parse_config_double(v, what);
    else if (k == "lambda2") c.lambda2 = parse_config_double(v, what);
    else if (k == "lambda3") c.lambda3 = parse_config_double(v, what);
    else if (k == "gamma2") c.gamma2 = parse_config_double(v, what);
    else if (k == "gamma3") c.gamma3 = parse_config_double(v, what);
    else if (k == "literal_s_update") c.literal_s_update = parse_config_bool(v, what);
    else if (k == "w_source") {
      if (v == "real") c.w_source = WSource::Real;
      else if (v == "synth") c.w_source = WSource::Synth;
      else throw ConfigError("invalid w_source '" + v + "' (expected real or synth)");
    } else if (k == "seed") c.seed = parse_config_uint(v, what);
    else if (k == "checkpoint_every") c.checkpoint_every = parse_config_uint(v, what);
    else if (k == "divergence_limit") c.divergence_limit = parse_config_double(v, what);
    else throw ConfigError("unknown training config key '" + k + "'");
  }
  c.validate();
  (void)suite_by_name(c.preset);
  return c;
}

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

const std::set<std::string>& dataset_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& [name, v] : dataset_config_map(DatasetConfig{})) k.insert(name);
    return k;
  }();
  return keys;
}

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& [name, v] : train_config_map(TrainConfig{})) k.insert(name);
    return k;
  }();
  return keys;
}

/// Options every subcommand shares.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data;
  ConfigMap overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "flat 'key = value' config file");
    app->add_option("--seed", seed, "seed for the dataset and training");
  }
  void attach_data(CLI::App* app) {
    app->add_option("--data", data, "dataset directory written by gen-data (default: build from config)");
  }

  /// Config file merged with flag overrides, restricted to the allowed keys.
  [[nodiscard]] ConfigMap resolve(bool with_dataset, bool with_train, const std::string& cmd) const {
    ConfigMap m = config.empty() ? ConfigMap{} : read_config_file(config);
    for (const auto& [k, v] : overrides) m[k] = v;
    if (seed) m["seed"] = std::to_string(*seed);
    for (const auto& [k, v] : m) {
      const bool ok = k == "seed" || (with_dataset && dataset_keys().contains(k)) || (with_train && train_keys().contains(k));
      if (!ok) throw ConfigError("unknown config key '" + k + "' for " + cmd);
    }
    return m;
  }
};

ConfigMap subset(const ConfigMap& m, const std::set<std::string>& keys) {
  ConfigMap out;
  for (const auto& [k, v] : m) {
    if (k == "seed" || keys.contains(k)) out[k] = v;
  }
  return out;
}

Dataset dataset_for(const Common& c, const ConfigMap& m) {
  if (!c.data.empty()) {
    if (!std::filesystem::exists(std::filesystem::path(c.data) / "dataset.cfg")) {
      throw Error("dataset directory '" + c.data + "' has no dataset.cfg");
    }
    return load_dataset(c.data);
  }
  return Dataset::build(dataset_config_from_map(subset(m, dataset_keys())));
}

/// Typed flag that lands in the config map when given.
template <class T>
void override_flag(CLI::App* app, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<T>(
      flag,
      [&c, key](const T& v) {
        if constexpr (std::is_floating_point_v<T>) c.overrides[key] = format_double(v);
        else if constexpr (std::is_same_v<T, std::string>) c.overrides[key] = v;
        else c.overrides[key] = std::to_string(v);
      },
      help);
}

void train_flags(CLI::App* app, Common& c) {
  override_flag<std::string>(app, c, "--preset", "preset", "network preset: desk or full");
  override_flag<std::size_t>(app, c, "--batch-size", "batch_size", "training batch size");
  override_flag<std::uint64_t>(app, c, "--steps1", "steps1", "image autoencoder steps");
  override_flag<std::uint64_t>(app, c, "--steps2", "steps2", "voxel branch steps");
  override_flag<std::uint64_t>(app, c, "--steps3", "steps3", "joint steps");
  override_flag<double>(app, c, "--phi2", "phi2", "adversarial weight of the image loss");
  override_flag<double>(app, c, "--phi3", "phi3", "adversarial weight of the voxel loss");
  override_flag<std::string>(app, c, "--w-source", "w_source", "unpaired image source: real or synth");
  override_flag<std::uint64_t>(app, c, "--checkpoint-every", "checkpoint_every", "checkpoint cadence in steps");
}

void dataset_flags(CLI::App* app, Common& c) {
  override_flag<std::size_t>(app, c, "--shapes", "shapes", "number of shapes");
  override_flag<std::size_t>(app, c, "--views", "views", "renders per shape");
  override_flag<double>(app, c, "--train-fraction", "train_fraction", "fraction of shapes used for training");
  override_flag<std::size_t>(app, c, "--voxel-size", "voxel_size", "voxel resolution");
  override_flag<std::size_t>(app, c, "--image-size", "image_size", "image resolution");
  override_flag<std::size_t>(app, c, "--real-shapes", "real_shapes", "shapes behind the REAL pool");
}

/// Trainer plus a state restored from `checkpoint` and checked against the networks.
struct Model {
  Trainer trainer;
  TrainState state;
};

Model load_model(const TrainConfig& cfg, const std::string& checkpoint) {
  Trainer trainer(cfg);
  TrainState state = state_from_checkpoint(read_checkpoint(checkpoint));
  const TrainState fresh = trainer.init();
  const std::pair<const ParameterSet*, const ParameterSet*> pairs[] = {
      {&state.g2, &fresh.g2}, {&state.d2, &fresh.d2}, {&state.g3, &fresh.g3}, {&state.d3, &fresh.d3}};
  for (const auto& [got, want] : pairs) {
    bool same = got->size() == want->size();
    for (std::size_t i = 0; same && i < got->size(); ++i) {
      same = got->entries()[i].name == want->entries()[i].name &&
             got->entries()[i].value.shape() == want->entries()[i].value.shape();
    }
    if (!same) throw Error("checkpoint '" + checkpoint + "' does not match the '" + cfg.preset + "' networks");
  }
  return {std::move(trainer), std::move(state)};
}

Domain parse_domain(const std::string& s) {
  if (s == "real") return Domain::Real;
  if (s == "synth") return Domain::Synth;
  throw ConfigError("invalid domain '" + s + "' (expected real or synth)");
}

ImageSample render_item(const Dataset& data, std::size_t synth_id, Domain domain) {
  if (synth_id >= data.synth().size()) {
    throw Error("item " + std::to_string(synth_id) + " is out of range (dataset has " +
                std::to_string(data.synth().size()) + " renders)");
  }
  const std::size_t views = data.config().views;
  return domain == Domain::Synth ? data.synth()[synth_id] : data.real_render(synth_id / views, synth_id % views);
}

/// Voxel files of a directory keyed by stem with a trailing "_<suffix>" removed.
/// Files carrying the suffix win when any exist.
std::map<std::string, std::filesystem::path> voxel_files(const std::string& dir, const std::string& suffix) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("voxel directory '" + dir + "' does not exist");
  std::map<std::string, fs::path> all, tagged;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".vox") continue;
    const std::string stem = e.path().stem().string();
    all[stem] = e.path();
    const std::string tail = "_" + suffix;
    if (stem.size() > tail.size() && stem.ends_with(tail)) tagged[stem.substr(0, stem.size() - tail.size())] = e.path();
  }
  return tagged.empty() ? all : tagged;
}

void write_latents(const std::filesystem::path& path, const std::vector<std::size_t>& ids, const Tensor& latents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  const std::size_t n = latents.dim(1);
  out << "id";
  for (std::size_t j = 0; j < n; ++j) out << ",z" << j;
  out << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i];
    for (std::size_t j = 0; j < n; ++j) out << ',' << format_double(latents[i * n + j]);
    out << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unsupervised single-image voxel reconstruction with adversarial domain adaptation", "voxadapt"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the procedural dataset directory");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  common.attach(gen);
  dataset_flags(gen, common);

  auto* train = app.add_subcommand("train", "run the three-phase training schedule");
  std::string train_out, resume;
  std::optional<std::uint64_t> stop_after;
  std::uint64_t log_every = 0;
  train->add_option("--out", train_out, "output directory for log.csv, train.cfg and checkpoints")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--stop-after", stop_after, "halt after this many global steps");
  train->add_option("--log-every", log_every, "print a progress line every N steps");
  common.attach(train);
  common.attach_data(train);
  train_flags(train, common);
  dataset_flags(train, common);

  auto* eval = app.add_subcommand("eval", "score voxel predictions by IoU");
  std::string pred_dir, truth_dir, eval_ckpt;
  double threshold = kDefaultIoUThreshold;
  bool aligned = false;
  eval->add_option("--pred", pred_dir, "directory of predicted .vox files");
  eval->add_option("--truth", truth_dir, "directory of ground-truth .vox files");
  eval->add_option("--checkpoint", eval_ckpt, "score a trained model on held-out REAL renders");
  eval->add_option("--t", threshold, "occupancy threshold");
  eval->add_flag("--aligned", aligned, "maximize IoU over small shifts and scales");
  common.attach(eval);
  common.attach_data(eval);
  train_flags(eval, common);
  dataset_flags(eval, common);

  auto* retrieve = app.add_subcommand("retrieve", "nearest train renders in latent space");
  std::string ret_ckpt, ret_domain = "real", latents_path;
  std::optional<std::size_t> query;
  std::size_t k = 5;
  bool score = false;
  retrieve->add_option("--checkpoint", ret_ckpt, "trained checkpoint")->required();
  retrieve->add_option("--query", query, "render id (shape * views + view) used as the query");
  retrieve->add_option("--domain", ret_domain, "query domain: real or synth");
  retrieve->add_option("--k", k, "neighbours to report");
  retrieve->add_option("--latents", latents_path, "write query and pool latent vectors to this CSV");
  retrieve->add_flag("--score", score, "report self and cross-domain retrieval rates");
  common.attach(retrieve);
  common.attach_data(retrieve);
  train_flags(retrieve, common);
  dataset_flags(retrieve, common);

  auto* sweep = app.add_subcommand("sweep-phi2", "train stage 1 for several phi2 values and compare");
  std::vector<double> values{0.3, 0.5, 0.7, 0.9};
  std::string sweep_out;
  std::size_t panel_items = 8;
  sweep->add_option("--values", values, "comma-separated phi2 values")->delimiter(',');
  sweep->add_option("--out", sweep_out, "output directory")->required();
  sweep->add_option("--panel-items", panel_items, "images per panel row");
  common.attach(sweep);
  common.attach_data(sweep);
  train_flags(sweep, common);
  dataset_flags(sweep, common);

  auto* exp = app.add_subcommand("export", "write inputs, reconstructions and voxels of a trained model");
  std::string exp_ckpt, exp_out, exp_domain = "real";
  std::vector<std::size_t> exp_items;
  exp->add_option("--checkpoint", exp_ckpt, "trained checkpoint")->required();
  exp->add_option("--out", exp_out, "output directory")->required();
  exp->add_option("--domain", exp_domain, "input domain: real or synth");
  exp->add_option("--items", exp_items, "render ids (default: view 0 of every held-out shape)")->delimiter(',');
  common.attach(exp);
  common.attach_data(exp);
  train_flags(exp, common);
  dataset_flags(exp, common);

  if (!args.empty() && !args.front().starts_with("-") && !app.get_subcommand_no_throw(args.front())) {
    err << "error: unknown subcommand '" << args.front() << "'\n\n" << app.help();
    return 2;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) {
      const ConfigMap m = common.resolve(true, false, "gen-data");
      const Dataset data = Dataset::build(dataset_config_from_map(m));
      const auto rows = write_dataset(gen_out, data);
      out << "wrote " << rows.size() << " files for " << data.shapes().size() << " shapes ("
          << data.train_shapes().size() << " train, " << data.test_shapes().size() << " test) to " << gen_out << '\n';
      return 0;
    }
    if (train->parsed()) {
      const ConfigMap m = common.resolve(common.data.empty(), true, "train");
      const Dataset data = dataset_for(common, m);
      const TrainConfig cfg = train_config_from_map(subset(m, train_keys()));
      const Trainer trainer(cfg);
      const std::filesystem::path dir(train_out);
      std::filesystem::create_directories(dir);
      {
        std::ofstream cfg_out(dir / "train.cfg", std::ios::binary | std::ios::trunc);
        if (!cfg_out) throw Error("cannot write '" + (dir / "train.cfg").string() + "'");
        cfg_out << format_config(train_config_map(cfg));
      }
      RunOptions opt;
      opt.log_path = dir / "log.csv";
      opt.checkpoint_dir = dir;
      if (!resume.empty()) opt.resume_from = resume;
      opt.stop_after = stop_after;
      if (log_every) {
        opt.on_step = [&](const LossReport& r) {
          if ((r.step + 1) % log_every == 0) {
            out << "step " << r.step + 1 << " phase " << r.phase << " L_G " << format_double(r.g) << " L_D "
                << format_double(r.d) << '\n';
          }
        };
      }
      const TrainState s = run_schedule(trainer, data, opt);
      out << "completed " << s.global_step << " of " << cfg.total_steps() << " steps; checkpoint "
          << (dir / "final.ckpt").string() << '\n';
      return 0;
    }
    if (eval->parsed()) {
      if (!pred_dir.empty() || !truth_dir.empty()) {
        if (pred_dir.empty() || truth_dir.empty()) throw UsageError("eval needs both --pred and --truth");
        (void)common.resolve(false, false, "eval");
        const auto preds = voxel_files(pred_dir, "pred");
        const auto truths = voxel_files(truth_dir, "truth");
        if (preds.empty()) throw Error("no .vox files in '" + pred_dir + "'");
        out << "item,iou\n";
        double sum = 0.0;
        for (const auto& [key, path] : preds) {
          const auto it = truths.find(key);
          if (it == truths.end()) throw Error("no ground truth for '" + key + "' in '" + truth_dir + "'");
          const VoxelGrid p = read_voxel(path), y = read_voxel(it->second);
          const double v = aligned ? compute_iou_aligned(p, y, threshold) : compute_iou(p, y, threshold);
          sum += v;
          out << key << ',' << format_double(v) << '\n';
        }
        out << "mean," << format_double(sum / static_cast<double>(preds.size())) << '\n';
        return 0;
      }
      if (eval_ckpt.empty()) throw UsageError("eval needs --pred and --truth, or --checkpoint");
      const ConfigMap m = common.resolve(common.data.empty(), true, "eval");
      const Dataset data = dataset_for(common, m);
      const Model model = load_model(train_config_from_map(subset(m, train_keys())), eval_ckpt);
      const auto samples = held_out_real(data);
      const IoUResult r = evaluate_samples(model.trainer, model.state, data, samples, threshold,
                                           aligned ? std::optional<AlignmentGrid>(AlignmentGrid{}) : std::nullopt);
      out << "item,shape,category,iou\n";
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::size_t shape = *samples[i].shape_id;
        out << samples[i].id << ',' << shape << ',' << to_string(data.shapes()[shape].recipe.category) << ','
            << format_double(r.items[i]) << '\n';
      }
      for (const auto& [cat, v] : r.category_mean) out << "mean,," << cat << ',' << format_double(v) << '\n';
      out << "mean,,all," << format_double(r.mean) << '\n';
      return 0;
    }
    if (retrieve->parsed()) {
      const ConfigMap m = common.resolve(common.data.empty(), true, "retrieve");
      const Dataset data = dataset_for(common, m);
      const Model model = load_model(train_config_from_map(subset(m, train_keys())), ret_ckpt);
      if (score) {
        const RetrievalScore self = self_retrieval(model.trainer, model.state, data);
        const RetrievalScore cross = cross_domain_retrieval(model.trainer, model.state, data, k);
        out << "metric,rate,chance,queries\n";
        out << "self_top1," << format_double(self.rate()) << ',' << format_double(self.chance()) << ','
            << self.queries << '\n';
        out << "cross_top" << k << ',' << format_double(cross.rate()) << ',' << format_double(cross.chance()) << ','
            << cross.queries << '\n';
        return 0;
      }
      if (!query) throw UsageError("retrieve needs --query or --score");
      const ImageSample q = render_item(data, *query, parse_domain(ret_domain));
      std::vector<ImageSample> pool;
      for (std::size_t s : data.train_shapes())
        for (std::size_t v = 0; v < data.config().views; ++v) pool.push_back(data.synth_item(s, v));
      const RetrievalResult r = retrieve_nearest(model.trainer, model.state, q, pool, k);
      if (!latents_path.empty()) {
        std::vector<ImageSample> all{q};
        all.insert(all.end(), pool.begin(), pool.end());
        std::vector<std::size_t> ids;
        for (const auto& s : all) ids.push_back(s.id);
        write_latents(latents_path, ids, encode_samples(model.trainer, model.state, all));
      }
      out << "rank,id,shape,distance\n";
      for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
        const auto& nb = r.neighbors[i];
        out << i + 1 << ',' << nb.id << ',' << *data.synth()[nb.id].shape_id << ',' << format_double(nb.distance)
            << '\n';
      }
      return 0;
    }
    if (sweep->parsed()) {
      const ConfigMap m = common.resolve(common.data.empty(), true, "sweep-phi2");
      const Dataset data = dataset_for(common, m);
      const SweepReport report = phi2_sweep(values, train_config_from_map(subset(m, train_keys())), data, panel_items);
      write_sweep(sweep_out, report);
      out << "phi2,real_l1,synth_l1,confusion\n";
      for (const auto& r : report.rows) {
        out << format_double(r.phi2) << ',' << format_double(r.real_l1) << ',' << format_double(r.synth_l1) << ','
            << format_double(r.confusion) << '\n';
      }
      return 0;
    }
    if (exp->parsed()) {
      const ConfigMap m = common.resolve(common.data.empty(), true, "export");
      const Dataset data = dataset_for(common, m);
      const Model model = load_model(train_config_from_map(subset(m, train_keys())), exp_ckpt);
      const Domain domain = parse_domain(exp_domain);
      if (exp_items.empty()) {
        for (std::size_t s : data.test_shapes()) exp_items.push_back(s * data.config().views);
      }
      std::vector<ImageSample> items;
      for (std::size_t id : exp_items) items.push_back(render_item(data, id, domain));
      const auto rows = export_outputs(model.trainer, model.state, data, items, exp_out);
      out << "exported " << items.size() << " items (" << rows.size() << " files) to " << exp_out << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace voxadapt
