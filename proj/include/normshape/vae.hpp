#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "normshape/checkpoint.hpp"
#include "normshape/graph.hpp"
#include "normshape/volume.hpp"

namespace normshape {

/// Fixed architecture hyperparameters.
struct VaeConfig {
  Dims input_dims{48, 32, 16};
  /// Spacing attached to decoded probability maps.
  Spacing input_spacing{1.0, 1.0, 2.0};
  int stages = 3;
  std::vector<int> channels{8, 16, 32};
  int latent_dim = 32;
  /// Steps over which the KL weight ramps 0 -> 1. Negative: 10% of training.
  long kl_warmup_steps = -1;
  double prob_clamp_eps = 1e-6;
  double leaky_slope = 0.01;

  void validate() const;
  /// Feature grid at the bottleneck, as [C, D, H, W].
  std::vector<int> bottleneck_shape() const;
};

/// Diagonal Gaussian q(z | X).
struct LatentPosterior {
  std::vector<double> mu;
  std::vector<double> logvar;
};

constexpr double kLogvarMin = -10.0;
constexpr double kLogvarMax = 10.0;

/// z = mu + exp(logvar / 2) * eps, eps ~ N(0, I) drawn from `seed`.
std::vector<double> reparameterize(const LatentPosterior& post, std::uint64_t seed);
/// Standard normal draws used by reparameterize for a given seed.
std::vector<double> standard_normal(std::size_t n, std::uint64_t seed);

/// Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I)).
double kl_gaussian(const LatentPosterior& post);

/// -sum_i [x_i log f_i + (1 - x_i) log(1 - f_i)].
double bernoulli_nll(const ScalarField& probs, const MaskVolume& mask);

struct LossTerms {
  double total = 0;
  double nll = 0;
  double kl = 0;
};

/// Convolutional VAE with a Bernoulli decoder. Encoder: per stage a stride-1
/// and a stride-2 3x3x3 conv (leaky ReLU), then a linear map to (mu, logvar).
/// Decoder mirrors it with transposed convs and ends in a 1-channel conv and
/// a clamped sigmoid.
template <typename T>
class VaeModel {
 public:
  VaeModel(VaeConfig config, std::uint64_t init_seed);

  const VaeConfig& config() const { return config_; }
  std::vector<nn::Parameter<T>>& parameters() { return params_; }
  const std::vector<nn::Parameter<T>>& parameters() const { return params_; }
  nn::Parameter<T>& parameter(const std::string& name);
  const nn::Parameter<T>& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  LatentPosterior encode(const MaskVolume& mask) const;
  ScalarField decode(std::span<const double> z) const;

  /// Negative ELBO for one mask, single-sample estimate with eps from `seed`.
  LossTerms loss(const MaskVolume& mask, std::uint64_t seed, double kl_weight) const;

  /// Recorded forward pass. With `trainable` the parameters are graph leaves
  /// whose gradients reach Parameter::grad on backward().
  struct Forward {
    nn::Graph<T> graph;
    nn::Var mu, logvar, z, probs, nll, kl, loss;
  };
  Forward forward(const MaskVolume& mask, std::span<const T> eps, double kl_weight,
                  bool trainable);

  std::vector<NamedTensor> to_tensors() const;
  static VaeModel from_tensors(const VaeConfig& config, const std::vector<NamedTensor>& tensors);

  /// Sets the output-layer bias to logit(p) (prior foreground probability).
  void set_output_prior(double foreground_fraction);

 private:
  template <typename Leaf>
  nn::Var build_encoder(nn::Graph<T>& g, nn::Var x, Leaf&& leaf) const;
  template <typename Leaf>
  nn::Var build_decoder(nn::Graph<T>& g, nn::Var z, Leaf&& leaf) const;
  void add_parameter(std::string name, std::vector<int> shape, double bound,
                     std::uint64_t seed);
  void check_input(const MaskVolume& mask) const;

  VaeConfig config_;
  std::vector<nn::Parameter<T>> params_;
};

using Vae = VaeModel<float>;

}  // namespace normshape
