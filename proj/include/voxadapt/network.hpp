#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "voxadapt/autodiff.hpp"
#include "voxadapt/parameters.hpp"

namespace voxadapt {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class LayerKind { Conv, Deconv, Conv3D, Deconv3D, Dense };

/// One token of the C(k,s) / DC(k,s) / FC(k) layer notation.
struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t width = 0;   ///< kernel count, or output width for dense
  std::size_t kernel = 0;  ///< spatial kernel extent; 0 for dense
  std::size_t stride = 2;  ///< 1 for dense

  [[nodiscard]] bool spatial() const noexcept { return kind != LayerKind::Dense; }
  [[nodiscard]] bool transposed() const noexcept { return kind == LayerKind::Deconv || kind == LayerKind::Deconv3D; }
  [[nodiscard]] std::size_t rank() const noexcept {
    return (kind == LayerKind::Conv3D || kind == LayerKind::Deconv3D) ? 3 : (kind == LayerKind::Dense ? 0 : 2);
  }
  bool operator==(const LayerSpec&) const = default;
};

/// Parses dash-separated tokens such as "C1(32,4)-FC2(200)-DC1^{3D}(128,4)".
/// Layer indices after the kind letters are ignored; "3D" or "^{3D}" selects
/// the rank-3 kinds; an optional third argument overrides the stride.
std::vector<LayerSpec> parse_layer_spec(std::string_view text);
std::string to_string(const LayerSpec& spec);
std::string to_string(const std::vector<LayerSpec>& specs);

/// Encoder-decoder topology. The encoder ends in the latent dense layer; the
/// decoder maps the latent vector to `output_shape` and is closed by a 1x1
/// stride-1 projection with sigmoid squashing. Networks with an empty encoder
/// take the latent vector itself as input.
struct NetworkConfig {
  std::string name;
  Shape input_shape;   ///< per-sample shape: {C,H,W}, {C,D,D,D} or {latent}
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;
  std::size_t latent_dim = 0;
  Shape output_shape;  ///< per-sample shape of the squashed output
  double slope = 0.2;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
};

/// Resolved layer after shape inference.
struct LayerPlan {
  LayerSpec spec;
  std::string prefix;
  Shape in_shape;
  Shape out_shape;
  bool batch_norm = true;
  bool activation = true;
  bool reshape_input = false;  ///< flat vector reshaped to [C, spatial...]
};

/// Ties a ParameterSet to leaves of a tape for one forward pass.
class Binding {
 public:
  Binding(Tape& tape, ParameterSet& params);

  [[nodiscard]] Var operator[](const std::string& name) const;
  [[nodiscard]] ParameterSet& params() const noexcept { return *params_; }
  [[nodiscard]] const std::vector<std::pair<std::string, Var>>& trainable() const noexcept { return vars_; }

 private:
  ParameterSet* params_;
  std::vector<std::pair<std::string, Var>> vars_;
  std::map<std::string, Var> lookup_;
};

/// Gradients of scalar `loss` for every trainable tensor of each binding.
/// Tensors off every path to the loss receive explicit zeros.
std::vector<GradientMap> backward(const Tape& tape, Var loss, std::initializer_list<const Binding*> wrt);
GradientMap backward(const Tape& tape, Var loss, const Binding& wrt);

struct ForwardOptions {
  Mode mode = Mode::Inference;
  bool update_stats = true;  ///< only meaningful in train mode
};

class Network {
 public:
  /// Validates the chained shapes; ConfigError names the offending layer.
  explicit Network(NetworkConfig config);

  [[nodiscard]] const NetworkConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<LayerPlan>& encoder_plan() const noexcept { return encoder_; }
  [[nodiscard]] const std::vector<LayerPlan>& decoder_plan() const noexcept { return decoder_; }
  [[nodiscard]] bool has_encoder() const noexcept { return !encoder_.empty(); }

  /// Randomly initialized weights; identical seeds give identical sets.
  [[nodiscard]] ParameterSet build(std::uint64_t seed) const;

  [[nodiscard]] Var encode(Tape& tape, Var input, const Binding& params, const ForwardOptions& opt) const;
  [[nodiscard]] Var decode(Tape& tape, Var latent, const Binding& params, const ForwardOptions& opt) const;
  [[nodiscard]] Var forward(Tape& tape, Var input, const Binding& params, const ForwardOptions& opt) const;

 private:
  Var run_layer(Tape& tape, Var x, const LayerPlan& layer, const Binding& params, const ForwardOptions& opt) const;
  void check_input(const Tensor& x, const Shape& expected, const char* what) const;

  NetworkConfig config_;
  std::vector<LayerPlan> encoder_;
  std::vector<LayerPlan> decoder_;
  LayerPlan head_;
};

/// The four networks of the pipeline.
struct NetworkSuite {
  NetworkConfig g2;  ///< image autoencoder: encoder T1, decoder T1'
  NetworkConfig d2;  ///< image autoencoder discriminator
  NetworkConfig g3;  ///< latent -> voxel generator
  NetworkConfig d3;  ///< voxel autoencoder discriminator

  [[nodiscard]] std::size_t image_size() const { return g2.input_shape.at(1); }
  [[nodiscard]] std::size_t voxel_size() const { return g3.output_shape.at(1); }
};

/// 16x16 images, 16^3 voxels, latent 32.
NetworkSuite desk_suite();
/// 64x64 images, 32^3 voxels, latent 200 and the full-size layer strings.
NetworkSuite full_suite();
NetworkSuite suite_by_name(const std::string& name);

/// Autoencoder-discriminator score mean|x - D(x)| over batch rows [begin, end).
Var autoencoder_score(Tape& tape, Var input, Var reconstruction, std::size_t begin, std::size_t end);

}  // namespace voxadapt
