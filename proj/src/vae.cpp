#include "normshape/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "normshape/error.hpp"
#include "normshape/random.hpp"

namespace normshape {

void VaeConfig::validate() const {
  if (stages < 1 || static_cast<int>(channels.size()) != stages) {
    throw Error(ErrorKind::InvalidArgument, "channels must list one count per stage");
  }
  for (int c : channels) {
    if (c < 1) throw Error(ErrorKind::InvalidArgument, "channel counts must be positive");
  }
  const int factor = 1 << stages;
  for (int a = 0; a < 3; ++a) {
    if (input_dims[a] <= 0 || input_dims[a] % factor != 0) {
      throw Error(ErrorKind::InvalidArgument,
                  "input extent " + std::to_string(input_dims[a]) + " not divisible by 2^" +
                      std::to_string(stages));
    }
  }
  if (latent_dim < 1) throw Error(ErrorKind::InvalidArgument, "latent_dim must be >= 1");
  if (!(prob_clamp_eps > 0) || !(prob_clamp_eps < 0.5)) {
    throw Error(ErrorKind::InvalidArgument, "prob_clamp_eps must lie in (0, 0.5)");
  }
}

std::vector<int> VaeConfig::bottleneck_shape() const {
  const int factor = 1 << stages;
  return {channels.back(), input_dims.nz / factor, input_dims.ny / factor, input_dims.nx / factor};
}

std::vector<double> standard_normal(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = normal(rng);
  return out;
}

std::vector<double> reparameterize(const LatentPosterior& post, std::uint64_t seed) {
  if (post.mu.size() != post.logvar.size()) {
    throw Error(ErrorKind::LengthMismatch, "posterior mu/logvar lengths differ");
  }
  const auto eps = standard_normal(post.mu.size(), seed);
  std::vector<double> z(post.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = post.mu[i] + std::exp(post.logvar[i] / 2) * eps[i];
  }
  return z;
}

double kl_gaussian(const LatentPosterior& post) {
  if (post.mu.size() != post.logvar.size()) {
    throw Error(ErrorKind::LengthMismatch, "posterior mu/logvar lengths differ");
  }
  double acc = 0;
  for (std::size_t i = 0; i < post.mu.size(); ++i) {
    acc += post.mu[i] * post.mu[i] + std::exp(post.logvar[i]) - 1.0 - post.logvar[i];
  }
  return 0.5 * acc;
}

double bernoulli_nll(const ScalarField& probs, const MaskVolume& mask) {
  if (!(probs.dims() == mask.dims())) {
    throw Error(ErrorKind::DimMismatch, "probability map and mask dims differ");
  }
  double acc = 0;
  for (std::size_t i = 0; i < mask.data().size(); ++i) {
    acc -= mask[i] ? std::log(probs[i]) : std::log(1.0 - probs[i]);
  }
  return acc;
}

namespace {

std::string stage_name(const char* prefix, int stage, const char* layer) {
  return std::string(prefix) + "." + std::to_string(stage) + "." + layer;
}

// Uniform bound for leaky-ReLU layers (He initialization).
double he_bound(double fan_in, double slope) {
  return std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
}

}  // namespace

template <typename T>
void VaeModel<T>::add_parameter(std::string name, std::vector<int> shape, double bound,
                                std::uint64_t seed) {
  nn::Tensor<T> value(std::move(shape));
  if (bound > 0) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (T& v : value.data) v = static_cast<T>(u(rng));
  }
  params_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
VaeModel<T>::VaeModel(VaeConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  const double slope = config_.leaky_slope;
  const int k3 = 27;
  std::uint64_t stream = 0;
  auto next_seed = [&] { return derive_seed(init_seed, stream++); };

  int c_in = 1;
  for (int s = 0; s < config_.stages; ++s) {
    const int c = config_.channels[s];
    add_parameter(stage_name("enc", s, "conv_a.weight"), {c, c_in, 3, 3, 3},
                  he_bound(c_in * k3, slope), next_seed());
    add_parameter(stage_name("enc", s, "conv_a.bias"), {c}, 0, 0);
    add_parameter(stage_name("enc", s, "conv_b.weight"), {c, c, 3, 3, 3}, he_bound(c * k3, slope),
                  next_seed());
    add_parameter(stage_name("enc", s, "conv_b.bias"), {c}, 0, 0);
    c_in = c;
  }
  const auto bottleneck = config_.bottleneck_shape();
  const int flat = static_cast<int>(nn::shape_size(bottleneck));
  const int latent = config_.latent_dim;
  // Linear heads are Glorot-scaled.
  add_parameter("enc.fc.weight", {2 * latent, flat}, std::sqrt(6.0 / (flat + 2 * latent)),
                next_seed());
  add_parameter("enc.fc.bias", {2 * latent}, 0, 0);
  add_parameter("dec.fc.weight", {flat, latent}, he_bound(latent, slope), next_seed());
  add_parameter("dec.fc.bias", {flat}, 0, 0);
  for (int s = config_.stages - 1; s >= 0; --s) {
    const int c = config_.channels[s];
    const int c_out = s > 0 ? config_.channels[s - 1] : config_.channels[0];
    // A stride-2 transposed conv feeds each output from about c * 27 / 8 inputs.
    add_parameter(stage_name("dec", s, "up.weight"), {c, c_out, 3, 3, 3},
                  he_bound(c * k3 / 8.0, slope), next_seed());
    add_parameter(stage_name("dec", s, "up.bias"), {c_out}, 0, 0);
    add_parameter(stage_name("dec", s, "conv.weight"), {c_out, c_out, 3, 3, 3},
                  he_bound(c_out * k3, slope), next_seed());
    add_parameter(stage_name("dec", s, "conv.bias"), {c_out}, 0, 0);
  }
  const int c0 = config_.channels[0];
  // 1x1x1 segmentation head.
  add_parameter("dec.out.weight", {1, c0, 1, 1, 1}, std::sqrt(6.0 / (c0 + 1)), next_seed());
  add_parameter("dec.out.bias", {1}, 0, 0);
}

template <typename T>
nn::Parameter<T>& VaeModel<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error(ErrorKind::InvalidArgument, "no parameter named " + name);
}

template <typename T>
const nn::Parameter<T>& VaeModel<T>::parameter(const std::string& name) const {
  return const_cast<VaeModel*>(this)->parameter(name);
}

template <typename T>
std::size_t VaeModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void VaeModel<T>::check_input(const MaskVolume& mask) const {
  if (!(mask.dims() == config_.input_dims)) {
    throw Error(ErrorKind::DimMismatch, "mask dims do not match the model input dims");
  }
}

template <typename T>
template <typename Leaf>
nn::Var VaeModel<T>::build_encoder(nn::Graph<T>& g, nn::Var x, Leaf&& leaf) const {
  const T slope = static_cast<T>(config_.leaky_slope);
  for (int s = 0; s < config_.stages; ++s) {
    x = g.conv3d(x, leaf(stage_name("enc", s, "conv_a.weight")),
                 leaf(stage_name("enc", s, "conv_a.bias")), 1, 1);
    x = g.leaky_relu(x, slope);
    x = g.conv3d(x, leaf(stage_name("enc", s, "conv_b.weight")),
                 leaf(stage_name("enc", s, "conv_b.bias")), 2, 1);
    x = g.leaky_relu(x, slope);
  }
  return g.linear(x, leaf("enc.fc.weight"), leaf("enc.fc.bias"));
}

template <typename T>
template <typename Leaf>
nn::Var VaeModel<T>::build_decoder(nn::Graph<T>& g, nn::Var z, Leaf&& leaf) const {
  const T slope = static_cast<T>(config_.leaky_slope);
  nn::Var h = g.linear(z, leaf("dec.fc.weight"), leaf("dec.fc.bias"));
  h = g.leaky_relu(h, slope);
  h = g.reshape(h, config_.bottleneck_shape());
  for (int s = config_.stages - 1; s >= 0; --s) {
    h = g.conv3d_transpose(h, leaf(stage_name("dec", s, "up.weight")),
                           leaf(stage_name("dec", s, "up.bias")), 2, 1, 1);
    h = g.leaky_relu(h, slope);
    h = g.conv3d(h, leaf(stage_name("dec", s, "conv.weight")),
                 leaf(stage_name("dec", s, "conv.bias")), 1, 1);
    h = g.leaky_relu(h, slope);
  }
  h = g.conv3d(h, leaf("dec.out.weight"), leaf("dec.out.bias"), 1, 0);
  h = g.sigmoid(h);
  const T eps = static_cast<T>(config_.prob_clamp_eps);
  return g.clamp(h, eps, T(1) - eps);
}

namespace {

template <typename T>
nn::Tensor<T> mask_tensor(const MaskVolume& mask) {
  const Dims& d = mask.dims();
  nn::Tensor<T> t({1, d.nz, d.ny, d.nx});
  for (std::size_t i = 0; i < mask.data().size(); ++i) t.data[i] = static_cast<T>(mask[i]);
  return t;
}

}  // namespace

template <typename T>
LatentPosterior VaeModel<T>::encode(const MaskVolume& mask) const {
  check_input(mask);
  nn::Graph<T> g;
  auto leaf = [&](const std::string& name) { return g.constant(parameter(name).value); };
  const nn::Var out = build_encoder(g, g.constant(mask_tensor<T>(mask)), leaf);
  const auto& v = g.value(out).data;
  const std::size_t latent = static_cast<std::size_t>(config_.latent_dim);
  LatentPosterior post;
  post.mu.assign(v.begin(), v.begin() + latent);
  post.logvar.resize(latent);
  for (std::size_t i = 0; i < latent; ++i) {
    post.logvar[i] = std::clamp(static_cast<double>(v[latent + i]), kLogvarMin, kLogvarMax);
  }
  return post;
}

template <typename T>
ScalarField VaeModel<T>::decode(std::span<const double> z) const {
  if (z.size() != static_cast<std::size_t>(config_.latent_dim)) {
    throw Error(ErrorKind::DimMismatch, "latent vector length differs from latent_dim");
  }
  nn::Graph<T> g;
  auto leaf = [&](const std::string& name) { return g.constant(parameter(name).value); };
  nn::Tensor<T> zt({config_.latent_dim});
  for (std::size_t i = 0; i < z.size(); ++i) zt.data[i] = static_cast<T>(z[i]);
  const nn::Var probs = build_decoder(g, g.constant(std::move(zt)), leaf);
  const auto& v = g.value(probs).data;
  return ScalarField(config_.input_dims, config_.input_spacing, std::vector<double>(v.begin(), v.end()));
}

template <typename T>
typename VaeModel<T>::Forward VaeModel<T>::forward(const MaskVolume& mask, std::span<const T> eps,
                                                    double kl_weight, bool trainable) {
  check_input(mask);
  if (eps.size() != static_cast<std::size_t>(config_.latent_dim)) {
    throw Error(ErrorKind::LengthMismatch, "eps length differs from latent_dim");
  }
  if (kl_weight < 0 || kl_weight > 1) {
    throw Error(ErrorKind::InvalidArgument, "kl_weight must lie in [0, 1]");
  }
  Forward f;
  nn::Graph<T>& g = f.graph;
  auto leaf = [&](const std::string& name) {
    return trainable ? g.parameter(parameter(name)) : g.constant(parameter(name).value);
  };
  const std::size_t latent = static_cast<std::size_t>(config_.latent_dim);
  const nn::Var head = build_encoder(g, g.constant(mask_tensor<T>(mask)), leaf);
  f.mu = g.slice(head, 0, latent);
  f.logvar = g.clamp(g.slice(head, latent, latent), static_cast<T>(kLogvarMin),
                     static_cast<T>(kLogvarMax));
  f.z = g.reparameterize(f.mu, f.logvar, std::vector<T>(eps.begin(), eps.end()));
  f.probs = build_decoder(g, f.z, leaf);
  f.nll = g.bernoulli_nll(f.probs, mask.data());
  f.kl = g.kl_gaussian(f.mu, f.logvar);
  f.loss = g.add(f.nll, g.scale(f.kl, static_cast<T>(kl_weight)));
  return f;
}

template <typename T>
LossTerms VaeModel<T>::loss(const MaskVolume& mask, std::uint64_t seed, double kl_weight) const {
  const auto eps_d = standard_normal(static_cast<std::size_t>(config_.latent_dim), seed);
  const std::vector<T> eps(eps_d.begin(), eps_d.end());
  Forward f = const_cast<VaeModel*>(this)->forward(mask, eps, kl_weight, false);
  return {static_cast<double>(f.graph.value(f.loss).data[0]),
          static_cast<double>(f.graph.value(f.nll).data[0]),
          static_cast<double>(f.graph.value(f.kl).data[0])};
}

template <typename T>
std::vector<NamedTensor> VaeModel<T>::to_tensors() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    out.push_back({p.name, p.value.shape,
                   std::vector<float>(p.value.data.begin(), p.value.data.end())});
  }
  return out;
}

template <typename T>
VaeModel<T> VaeModel<T>::from_tensors(const VaeConfig& config,
                                      const std::vector<NamedTensor>& tensors) {
  VaeModel model(config, 0);
  for (auto& p : model.params_) {
    const NamedTensor& t = find_tensor(tensors, p.name);
    if (t.shape != p.value.shape) {
      throw Error(ErrorKind::ShapeMismatch, "checkpoint tensor " + p.name + " has shape " +
                                                nn::shape_string(t.shape) + ", expected " +
                                                nn::shape_string(p.value.shape));
    }
    std::copy(t.data.begin(), t.data.end(), p.value.data.begin());
  }
  return model;
}

template <typename T>
void VaeModel<T>::set_output_prior(double foreground_fraction) {
  const double p = std::clamp(foreground_fraction, 1e-4, 1 - 1e-4);
  parameter("dec.out.bias").value.data[0] = static_cast<T>(std::log(p / (1 - p)));
}

template class VaeModel<float>;
template class VaeModel<double>;

}  // namespace normshape
