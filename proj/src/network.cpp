#include "voxadapt/network.hpp"

#include <cmath>
#include <regex>
#include <sstream>

#include "voxadapt/rng.hpp"

namespace voxadapt {

// ---------------------------------------------------------------------------
// Layer notation

std::vector<LayerSpec> parse_layer_spec(std::string_view text) {
  static const std::regex token_re(R"(^(DC|C|FC)(\d*)(\^\{3D\}|\^3D|3D)?\((\d+)(?:,(\d+))?(?:,(\d+))?\)$)");
  std::vector<LayerSpec> out;
  std::string s(text);
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t dash = s.find('-', pos);
    if (dash == std::string::npos) dash = s.size();
    std::string tok = s.substr(pos, dash - pos);
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    std::smatch m;
    if (!std::regex_match(tok, m, token_re)) throw ConfigError("malformed layer token '" + tok + "'");
    const std::string kind = m[1];
    const bool three_d = m[3].matched;
    LayerSpec spec;
    spec.width = std::stoul(m[4]);
    if (kind == "FC") {
      if (m[5].matched) throw ConfigError("dense layer '" + tok + "' cannot take a kernel size");
      if (three_d) throw ConfigError("dense layer '" + tok + "' has no 3D variant");
      spec.kind = LayerKind::Dense;
      spec.stride = 1;
    } else {
      if (!m[5].matched) throw ConfigError("layer '" + tok + "' needs a kernel size");
      spec.kernel = std::stoul(m[5]);
      if (m[6].matched) spec.stride = std::stoul(m[6]);
      if (kind == "C") {
        spec.kind = three_d ? LayerKind::Conv3D : LayerKind::Conv;
      } else {
        spec.kind = three_d ? LayerKind::Deconv3D : LayerKind::Deconv;
      }
      if (spec.kernel == 0 || spec.stride == 0) throw ConfigError("layer '" + tok + "' has a zero kernel or stride");
    }
    if (spec.width == 0) throw ConfigError("layer '" + tok + "' has zero width");
    out.push_back(spec);
    pos = dash + 1;
    if (dash == s.size()) break;
  }
  return out;
}

std::string to_string(const LayerSpec& spec) {
  std::ostringstream os;
  switch (spec.kind) {
    case LayerKind::Dense: os << "FC(" << spec.width << ")"; return os.str();
    case LayerKind::Conv: os << "C("; break;
    case LayerKind::Deconv: os << "DC("; break;
    case LayerKind::Conv3D: os << "C^{3D}("; break;
    case LayerKind::Deconv3D: os << "DC^{3D}("; break;
  }
  os << spec.width << ',' << spec.kernel;
  if (spec.stride != 2) os << ',' << spec.stride;
  os << ')';
  return os.str();
}

std::string to_string(const std::vector<LayerSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) out += '-';
    out += to_string(specs[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape planning

namespace {

[[noreturn]] void layer_error(const NetworkConfig& c, const char* part, std::size_t i, const LayerSpec& s,
                              const std::string& msg) {
  throw ConfigError(c.name + " " + part + " layer " + std::to_string(i) + " (" + to_string(s) + "): " + msg);
}

std::size_t spatial_rank(const Shape& s) { return s.size() - 1; }

}  // namespace

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  const auto& c = config_;
  if (c.latent_dim == 0) throw ConfigError(c.name + ": latent dimension must be positive");
  if (c.input_shape.empty() || c.output_shape.size() < 3) throw ConfigError(c.name + ": invalid input/output shape");
  if (!(c.slope > 0.0 && c.slope < 1.0)) throw ConfigError(c.name + ": activation slope must lie in (0,1)");

  Shape cur = c.input_shape;
  if (c.encoder.empty()) {
    if (cur != Shape{c.latent_dim}) {
      throw ConfigError(c.name + ": a network without encoder takes the latent vector; input " +
                        shape_to_string(cur) + " does not match latent " + std::to_string(c.latent_dim));
    }
  } else if (cur.size() != 3 && cur.size() != 4) {
    throw ConfigError(c.name + ": encoder input must be [C,H,W] or [C,D,D,D]");
  }
  bool flat = cur.size() == 1;
  for (std::size_t i = 0; i < c.encoder.size(); ++i) {
    const LayerSpec& s = c.encoder[i];
    LayerPlan p;
    p.spec = s;
    p.prefix = "enc" + std::to_string(i);
    p.in_shape = cur;
    if (s.spatial()) {
      if (s.transposed()) layer_error(c, "encoder", i, s, "deconvolution not allowed in an encoder");
      if (flat) layer_error(c, "encoder", i, s, "convolution cannot follow a dense layer");
      if (s.rank() != spatial_rank(cur)) {
        layer_error(c, "encoder", i, s,
                    "kind is rank " + std::to_string(s.rank()) + " but input has " +
                        std::to_string(spatial_rank(cur)) + " spatial axes");
      }
      Shape next{s.width};
      for (std::size_t a = 1; a < cur.size(); ++a) next.push_back((cur[a] + s.stride - 1) / s.stride);
      cur = next;
    } else {
      cur = Shape{s.width};
      flat = true;
    }
    p.out_shape = cur;
    encoder_.push_back(p);
  }
  if (!encoder_.empty()) {
    LayerPlan& last = encoder_.back();
    if (last.spec.spatial()) layer_error(c, "encoder", encoder_.size() - 1, last.spec, "encoder must end in a dense latent layer");
    if (last.spec.width != c.latent_dim) {
      layer_error(c, "encoder", encoder_.size() - 1, last.spec,
                  "latent layer width " + std::to_string(last.spec.width) + " differs from latent dimension " +
                      std::to_string(c.latent_dim));
    }
    last.batch_norm = false;
    last.activation = false;
  }

  // Decoder: dense block, then transposed convolutions up to the output extent.
  cur = Shape{c.latent_dim};
  const std::size_t out_rank = spatial_rank(c.output_shape);
  std::size_t upsample = 1;
  std::size_t first_spatial = c.decoder.size();
  for (std::size_t i = 0; i < c.decoder.size(); ++i) {
    const LayerSpec& s = c.decoder[i];
    if (s.spatial()) {
      if (!s.transposed()) layer_error(c, "decoder", i, s, "only deconvolutions may follow the dense block");
      if (s.rank() != out_rank) layer_error(c, "decoder", i, s, "kind rank does not match output rank");
      if (first_spatial == c.decoder.size()) first_spatial = i;
      upsample *= s.stride;
    } else if (first_spatial != c.decoder.size()) {
      layer_error(c, "decoder", i, s, "dense layer cannot follow a deconvolution");
    }
  }
  if (first_spatial == c.decoder.size()) throw ConfigError(c.name + ": decoder needs at least one deconvolution");
  std::size_t base_count = 1;
  Shape base_extent;
  for (std::size_t a = 1; a < c.output_shape.size(); ++a) {
    if (c.output_shape[a] % upsample != 0) {
      layer_error(c, "decoder", first_spatial, c.decoder[first_spatial],
                  "output extent " + std::to_string(c.output_shape[a]) + " not divisible by total upsampling " +
                      std::to_string(upsample));
    }
    base_extent.push_back(c.output_shape[a] / upsample);
    base_count *= base_extent.back();
  }
  for (std::size_t i = 0; i < c.decoder.size(); ++i) {
    const LayerSpec& s = c.decoder[i];
    LayerPlan p;
    p.spec = s;
    p.prefix = "dec" + std::to_string(i);
    p.in_shape = cur;
    if (!s.spatial()) {
      cur = Shape{s.width};
    } else {
      if (i == first_spatial) {
        const std::size_t w = cur[0];
        if (w % base_count != 0) {
          layer_error(c, "decoder", i, s,
                      "fed width " + std::to_string(w) + " which does not reshape onto base extent " +
                          shape_to_string(base_extent));
        }
        p.reshape_input = true;
        Shape r{w / base_count};
        r.insert(r.end(), base_extent.begin(), base_extent.end());
        p.in_shape = r;
        cur = r;
      }
      Shape next{s.width};
      for (std::size_t a = 1; a < cur.size(); ++a) next.push_back(cur[a] * s.stride);
      cur = next;
    }
    p.out_shape = cur;
    decoder_.push_back(p);
  }
  head_.spec = LayerSpec{out_rank == 3 ? LayerKind::Conv3D : LayerKind::Conv, c.output_shape[0], 1, 1};
  head_.prefix = "head";
  head_.in_shape = cur;
  head_.out_shape = c.output_shape;
  head_.batch_norm = false;
  head_.activation = false;
}

ParameterSet Network::build(std::uint64_t seed) const {
  ParameterSet ps(config_.name);
  Rng rng(mix_seed(seed, 0x5eed));
  auto uniform_tensor = [&rng](Shape shape, double fan_in, double fan_out) {
    Tensor t(std::move(shape));
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.data()) v = rng.uniform(-limit, limit);
    return t;
  };
  auto add_layer = [&](const LayerPlan& p) {
    const LayerSpec& s = p.spec;
    std::size_t out_ch = s.width;
    if (s.spatial()) {
      const std::size_t in_ch = p.in_shape[0];
      const std::size_t kc = static_cast<std::size_t>(std::pow(s.kernel, s.rank()));
      Shape ks = s.transposed() ? Shape{in_ch, out_ch} : Shape{out_ch, in_ch};
      for (std::size_t a = 0; a < s.rank(); ++a) ks.push_back(s.kernel);
      ps.add(p.prefix + ".kernel", uniform_tensor(ks, static_cast<double>(in_ch * kc), static_cast<double>(out_ch * kc)));
    } else {
      const std::size_t in = shape_numel(p.in_shape);
      ps.add(p.prefix + ".weight", uniform_tensor({out_ch, in}, static_cast<double>(in), static_cast<double>(out_ch)));
    }
    ps.add(p.prefix + ".bias", Tensor({out_ch}, 0.0));
    if (p.batch_norm) {
      ps.add(p.prefix + ".bn_scale", Tensor({out_ch}, 1.0));
      ps.add(p.prefix + ".bn_shift", Tensor({out_ch}, 0.0));
      ps.add(p.prefix + ".bn_mean", Tensor({out_ch}, 0.0), false);
      ps.add(p.prefix + ".bn_var", Tensor({out_ch}, 1.0), false);
    }
  };
  for (const auto& p : encoder_) add_layer(p);
  for (const auto& p : decoder_) add_layer(p);
  add_layer(head_);
  return ps;
}

void Network::check_input(const Tensor& x, const Shape& expected, const char* what) const {
  if (x.rank() != expected.size() + 1 || !std::equal(expected.begin(), expected.end(), x.shape().begin() + 1)) {
    throw ShapeError(config_.name + " " + what + " expects [N," + shape_to_string(expected).substr(1) + " but got " +
                     shape_to_string(x.shape()));
  }
}

Var Network::run_layer(Tape& tape, Var x, const LayerPlan& layer, const Binding& params,
                       const ForwardOptions& opt) const {
  const LayerSpec& s = layer.spec;
  const std::size_t n = tape.value(x).dim(0);
  Var h;
  if (s.spatial()) {
    if (layer.reshape_input) {
      Shape r{n};
      r.insert(r.end(), layer.in_shape.begin(), layer.in_shape.end());
      x = reshape(tape, x, r);
    }
    ConvOptions co;
    co.stride = s.stride;
    co.rank = s.rank() == 3 ? ConvRank::Three : ConvRank::Two;
    co.transposed = s.transposed();
    h = conv(tape, x, params[layer.prefix + ".kernel"], params[layer.prefix + ".bias"], co);
  } else {
    h = dense(tape, x, params[layer.prefix + ".weight"], params[layer.prefix + ".bias"]);
  }
  if (layer.batch_norm) {
    ParameterSet& ps = params.params();
    RunningStats rs{&ps.get(layer.prefix + ".bn_mean"), &ps.get(layer.prefix + ".bn_var"), config_.bn_momentum,
                    config_.bn_eps};
    h = batch_norm(tape, h, params[layer.prefix + ".bn_scale"], params[layer.prefix + ".bn_shift"], opt.mode, rs,
                   opt.update_stats);
  }
  if (layer.activation) h = leaky_relu(tape, h, config_.slope);
  return h;
}

Var Network::encode(Tape& tape, Var input, const Binding& params, const ForwardOptions& opt) const {
  if (encoder_.empty()) throw ConfigError(config_.name + " has no encoder");
  check_input(tape.value(input), config_.input_shape, "encoder");
  Var h = input;
  for (const auto& layer : encoder_) h = run_layer(tape, h, layer, params, opt);
  return h;
}

Var Network::decode(Tape& tape, Var latent, const Binding& params, const ForwardOptions& opt) const {
  check_input(tape.value(latent), Shape{config_.latent_dim}, "decoder");
  Var h = latent;
  for (const auto& layer : decoder_) h = run_layer(tape, h, layer, params, opt);
  h = run_layer(tape, h, head_, params, opt);
  return sigmoid(tape, h);
}

Var Network::forward(Tape& tape, Var input, const Binding& params, const ForwardOptions& opt) const {
  if (encoder_.empty()) return decode(tape, input, params, opt);
  return decode(tape, encode(tape, input, params, opt), params, opt);
}

// ---------------------------------------------------------------------------
// Binding / backward

Binding::Binding(Tape& tape, ParameterSet& params) : params_(&params) {
  for (const auto& p : params.entries()) {
    if (!p.trainable) continue;
    Var v = tape.leaf(p.value);
    vars_.emplace_back(p.name, v);
    lookup_.emplace(p.name, v);
  }
}

Var Binding::operator[](const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw Error("parameter '" + name + "' not bound for " + params_->name());
  return it->second;
}

std::vector<GradientMap> backward(const Tape& tape, Var loss, std::initializer_list<const Binding*> wrt) {
  std::vector<Var> vars;
  for (const Binding* b : wrt)
    for (const auto& [name, v] : b->trainable()) vars.push_back(v);
  std::vector<Tensor> grads = tape.gradients(loss, vars);
  std::vector<GradientMap> out;
  std::size_t k = 0;
  for (const Binding* b : wrt) {
    GradientMap gm;
    for (const auto& [name, v] : b->trainable()) gm.emplace(name, std::move(grads[k++]));
    out.push_back(std::move(gm));
  }
  return out;
}

GradientMap backward(const Tape& tape, Var loss, const Binding& wrt) {
  return std::move(backward(tape, loss, {&wrt}).front());
}

Var autoencoder_score(Tape& tape, Var input, Var reconstruction, std::size_t begin, std::size_t end) {
  return l1_loss(tape, slice_batch(tape, input, begin, end), slice_batch(tape, reconstruction, begin, end));
}

// ---------------------------------------------------------------------------
// Presets

namespace {

NetworkConfig make(std::string name, Shape in, const char* enc, const char* dec, std::size_t latent, Shape out) {
  NetworkConfig c;
  c.name = std::move(name);
  c.input_shape = std::move(in);
  c.encoder = enc[0] ? parse_layer_spec(enc) : std::vector<LayerSpec>{};
  c.decoder = parse_layer_spec(dec);
  c.latent_dim = latent;
  c.output_shape = std::move(out);
  return c;
}

}  // namespace

NetworkSuite desk_suite() {
  constexpr const char* enc2 = "C(8,4)-C(16,4)-C(32,4)-FC(64)-FC(32)";
  constexpr const char* dec2 = "FC(64)-DC(32,4)-DC(16,4)-DC(8,4)";
  constexpr const char* enc3 = "C^{3D}(8,4)-C^{3D}(16,4)-C^{3D}(32,4)-FC(64)-FC(32)";
  constexpr const char* dec3 = "FC(64)-DC^{3D}(32,4)-DC^{3D}(16,4)-DC^{3D}(8,4)";
  NetworkSuite s;
  s.g2 = make("G2", {1, 16, 16}, enc2, dec2, 32, {1, 16, 16});
  s.d2 = make("D2", {1, 16, 16}, enc2, dec2, 32, {1, 16, 16});
  s.g3 = make("G3", {32}, "", dec3, 32, {1, 16, 16, 16});
  s.d3 = make("D3", {1, 16, 16, 16}, enc3, dec3, 32, {1, 16, 16, 16});
  return s;
}

NetworkSuite full_suite() {
  constexpr const char* enc2 = "C1(32,4)-C2(64,4)-C3(128,4)-FC1(512)-FC2(200)";
  constexpr const char* dec2 = "FC3(512)-DC1(128,4)-DC2(64,4)-DC3(32,4)";
  constexpr const char* enc3 = "C1^{3D}(32,4)-C2^{3D}(64,4)-C3^{3D}(128,4)-FC1(512)-FC2(200)";
  constexpr const char* dec3 = "FC3(512)-DC1^{3D}(128,4)-DC2^{3D}(64,4)-DC3^{3D}(32,4)";
  NetworkSuite s;
  s.g2 = make("G2", {1, 64, 64}, enc2, dec2, 200, {1, 64, 64});
  s.d2 = make("D2", {1, 64, 64}, enc2, dec2, 200, {1, 64, 64});
  s.g3 = make("G3", {200}, "", dec3, 200, {1, 32, 32, 32});
  s.d3 = make("D3", {1, 32, 32, 32}, enc3, dec3, 200, {1, 32, 32, 32});
  return s;
}

NetworkSuite suite_by_name(const std::string& name) {
  if (name == "desk") return desk_suite();
  if (name == "full") return full_suite();
  throw ConfigError("unknown network preset '" + name + "' (expected desk or full)");
}

}  // namespace voxadapt
