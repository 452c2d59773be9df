#include "voxadapt/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace voxadapt {

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(std::string_view s, const std::string& what) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("invalid number '" + std::string(s) + "' in " + what);
  return v;
}

std::size_t parse_size(std::string_view s, const std::string& what) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("invalid integer '" + std::string(s) + "' in " + what);
  return v;
}

/// Whitespace tokenizer over a whole file.
class Tokens {
 public:
  explicit Tokens(const std::string& text) : text_(text) {}
  std::string_view next(const std::string& what) {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    if (pos_ >= text_.size()) throw Error("unexpected end of " + what);
    const std::size_t b = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    return std::string_view(text_).substr(b, pos_ - b);
  }
  bool done() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    return pos_ >= text_.size();
  }

 private:
  const std::string& text_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_voxel(const std::filesystem::path& path, const VoxelGrid& grid) {
  const std::size_t d = grid.size;
  std::string out = "voxel " + std::to_string(d) + " " + std::to_string(d) + " " + std::to_string(d) + "\n";
  for (std::size_t x = 0; x < d; ++x) {
    for (std::size_t y = 0; y < d; ++y) {
      for (std::size_t z = 0; z < d; ++z) {
        if (z) out += ' ';
        out += format_double(grid.at(x, y, z));
      }
      out += '\n';
    }
  }
  spill(path, out);
}

VoxelGrid read_voxel(const std::filesystem::path& path) {
  const std::string text = slurp(path);
  const std::string what = "voxel file '" + path.string() + "'";
  Tokens tok(text);
  if (tok.next(what) != "voxel") throw Error(what + " lacks the 'voxel' header");
  const std::size_t a = parse_size(tok.next(what), what), b = parse_size(tok.next(what), what),
                    c = parse_size(tok.next(what), what);
  if (a != b || b != c || a == 0) throw Error(what + " is not a non-empty cube");
  VoxelGrid g(a);
  for (auto& v : g.values) {
    v = parse_double(tok.next(what), what);
    if (!(v >= 0.0 && v <= 1.0)) throw Error(what + " holds a value outside [0,1]");
  }
  if (!tok.done()) throw Error(what + " has trailing data");
  return g;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  std::size_t h = 0, w = 0;
  if (image.rank() == 3 && image.dim(0) == 1) {
    h = image.dim(1);
    w = image.dim(2);
  } else if (image.rank() == 2) {
    h = image.dim(0);
    w = image.dim(1);
  } else {
    throw ShapeError("PGM export expects [1,H,W] or [H,W], got " + shape_to_string(image.shape()));
  }
  std::string out = "P2\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double v = std::clamp(image[r * w + c], 0.0, 1.0);
      if (c) out += ' ';
      out += std::to_string(static_cast<int>(std::lround(v * 255.0)));
    }
    out += '\n';
  }
  spill(path, out);
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::string text = slurp(path);
  // Strip comments.
  std::string clean;
  bool comment = false;
  for (char ch : text) {
    if (ch == '#') comment = true;
    if (ch == '\n') comment = false;
    clean += comment ? ' ' : ch;
  }
  const std::string what = "PGM file '" + path.string() + "'";
  Tokens tok(clean);
  if (tok.next(what) != "P2") throw Error(what + " is not a plain PGM (P2)");
  const std::size_t w = parse_size(tok.next(what), what), h = parse_size(tok.next(what), what);
  const std::size_t maxval = parse_size(tok.next(what), what);
  if (maxval == 0) throw Error(what + " has zero maxval");
  Tensor img({1, h, w});
  for (auto& v : img.data()) {
    const std::size_t level = parse_size(tok.next(what), what);
    if (level > maxval) throw Error(what + " has a level above maxval");
    v = static_cast<double>(level) / static_cast<double>(maxval);
  }
  return img;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.item_id) + "," + r.kind + "," + r.path + ",";
    if (r.azimuth) out += format_double(*r.azimuth);
    out += ",";
    if (r.pair_id) out += std::to_string(*r.pair_id);
    out += "\n";
  }
  spill(path, out);
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::istringstream in(slurp(path));
  std::string line;
  const std::string what = "manifest '" + path.string() + "'";
  if (!std::getline(in, line) || trim(line) != kManifestHeader) throw Error(what + " has an unexpected header");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw Error(what + " row '" + line + "' does not have 5 fields");
    ManifestRow r;
    r.item_id = parse_size(f[0], what);
    r.kind = f[1];
    r.path = f[2];
    if (!f[3].empty()) r.azimuth = parse_double(f[3], what);
    if (!f[4].empty()) r.pair_id = parse_size(trim(f[4]), what);
    rows.push_back(std::move(r));
  }
  return rows;
}

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw Error("config line " + std::to_string(lineno) + " has an empty key");
    out[key] = value;
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("config file '" + path.string() + "' does not exist");
  return parse_config_text(slurp(path));
}

std::string format_config(const ConfigMap& config) {
  std::string out;
  for (const auto& [k, v] : config) out += k + " = " + v + "\n";
  return out;
}

ConfigMap dataset_config_map(const DatasetConfig& c) {
  return {{"shapes", std::to_string(c.shapes)},
          {"views", std::to_string(c.views)},
          {"train_fraction", format_double(c.train_fraction)},
          {"voxel_size", std::to_string(c.voxel_size)},
          {"image_size", std::to_string(c.image_size)},
          {"real_shapes", std::to_string(c.real_shapes)},
          {"seed", std::to_string(c.seed)}};
}

DatasetConfig dataset_config_from_map(const ConfigMap& m) {
  DatasetConfig c;
  const std::string what = "dataset config";
  for (const auto& [k, v] : m) {
    if (k == "shapes") c.shapes = parse_size(v, what);
    else if (k == "views") c.views = parse_size(v, what);
    else if (k == "train_fraction") c.train_fraction = parse_double(v, what);
    else if (k == "voxel_size") c.voxel_size = parse_size(v, what);
    else if (k == "image_size") c.image_size = parse_size(v, what);
    else if (k == "real_shapes") c.real_shapes = parse_size(v, what);
    else if (k == "seed") c.seed = parse_size(v, what);
    else throw Error("unknown dataset config key '" + k + "'");
  }
  c.validate();
  return c;
}

std::vector<ManifestRow> write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  for (const char* sub : {"voxels", "synth", "real", "test_real"}) fs::create_directories(dir / sub);
  spill(dir / "dataset.cfg", format_config(dataset_config_map(ds.config())));
  std::vector<ManifestRow> rows;
  for (const auto& s : ds.shapes()) {
    const std::string rel = "voxels/shape" + std::to_string(s.id) + ".vox";
    write_voxel(dir / rel, s.grid);
    rows.push_back({s.id, s.train ? "voxel_train" : "voxel_test", rel, std::nullopt, std::nullopt});
  }
  for (const auto& img : ds.synth()) {
    const std::string rel = "synth/item" + std::to_string(img.id) + ".pgm";
    write_pgm(dir / rel, img.pixels);
    rows.push_back({img.id, "synth", rel, img.azimuth, img.shape_id});
  }
  for (const auto& img : ds.real_pool()) {
    const std::string rel = "real/item" + std::to_string(img.id) + ".pgm";
    write_pgm(dir / rel, img.pixels);
    rows.push_back({img.id, "real", rel, img.azimuth, std::nullopt});
  }
  for (auto s : ds.test_shapes()) {
    for (std::size_t v = 0; v < ds.config().views; ++v) {
      const ImageSample img = ds.real_render(s, v);
      const std::string rel = "test_real/item" + std::to_string(img.id) + ".pgm";
      write_pgm(dir / rel, img.pixels);
      rows.push_back({img.id, "real_eval", rel, img.azimuth, img.shape_id});
    }
  }
  write_manifest(dir / "manifest.csv", rows);
  return rows;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  return Dataset::build(dataset_config_from_map(read_config_file(dir / "dataset.cfg")));
}

double parse_config_double(std::string_view text, const std::string& what) { return parse_double(text, what); }

std::uint64_t parse_config_uint(std::string_view text, const std::string& what) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw Error("invalid integer '" + std::string(text) + "' in " + what);
  }
  return v;
}

bool parse_config_bool(std::string_view text, const std::string& what) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw Error("invalid boolean '" + std::string(text) + "' in " + what);
}

}  // namespace voxadapt
