#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "normshape/checkpoint.hpp"
#include "normshape/error.hpp"
#include "normshape/graph.hpp"
#include "normshape/sgd.hpp"
#include "normshape/tensor.hpp"

using namespace normshape;
using namespace normshape::nn;

namespace {

using T3 = Tensor<double>;

T3 random_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  T3 t(std::move(shape));
  std::normal_distribution<double> n(0, 1);
  for (auto& v : t.data) v = n(rng);
  return t;
}

// Direct seven-loop cross-correlation with zero padding.
T3 naive_conv(const T3& x, const T3& k, const T3& b, int s, int p) {
  const int ci = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int co = k.dim(0), ks = k.dim(2);
  const int od = (D + 2 * p - ks) / s + 1, oh = (H + 2 * p - ks) / s + 1, ow = (W + 2 * p - ks) / s + 1;
  T3 y({co, od, oh, ow});
  for (int o = 0; o < co; ++o)
    for (int z = 0; z < od; ++z)
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
          double acc = b.data[o];
          for (int i = 0; i < ci; ++i)
            for (int a = 0; a < ks; ++a)
              for (int bb = 0; bb < ks; ++bb)
                for (int e = 0; e < ks; ++e) {
                  const int zz = z * s - p + a, rr = r * s - p + bb, cc = c * s - p + e;
                  if (zz < 0 || zz >= D || rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                  acc += k.data[(((o * ci + i) * ks + a) * ks + bb) * ks + e] *
                         x.data[((i * D + zz) * H + rr) * W + cc];
                }
          y.data[((o * od + z) * oh + r) * ow + c] = acc;
        }
  return y;
}

double dot(const T3& a, const T3& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no Error thrown";
  return ErrorKind::InvalidArgument;
}

// Builds loss = sum(w * op(params)) for a fixed random w and checks every
// parameter gradient against central differences.
double max_fd_error(std::vector<Parameter<double>>& params,
                    const std::function<Var(Graph<double>&, std::vector<Var>&)>& op, double h,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T3 weights;
  auto loss = [&](bool record) {
    Graph<double> g;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(g.parameter(p));
    Var y = op(g, leaves);
    if (weights.shape.empty()) weights = random_tensor(g.value(y).shape, rng);
    double v = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) v += weights.data[i] * g.value(y).data[i];
    if (record) {
      Var wconst = g.constant(T3({1, int(weights.size())}, weights.data));
      Var flat = g.reshape(y, {int(weights.size())});
      Var zero = g.constant(T3({1}, 0.0));
      g.backward(g.sum(g.linear(flat, wconst, zero)));
    }
    return v;
  };
  for (auto& p : params) p.zero_grad();
  loss(true);
  double worst = 0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double w0 = p.value.data[i];
      p.value.data[i] = w0 + h;
      const double up = loss(false);
      p.value.data[i] = w0 - h;
      const double down = loss(false);
      p.value.data[i] = w0;
      const double num = (up - down) / (2 * h);
      const double ana = p.grad.data[i];
      worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8}));
    }
  }
  return worst;
}

}  // namespace

TEST(Conv3d, MatchesNaiveLoops) {
  std::mt19937_64 rng(1);
  for (int s : {1, 2}) {
    for (int p : {0, 1}) {
      const T3 x = random_tensor({3, 7, 6, 5}, rng);
      const T3 k = random_tensor({4, 3, 3, 3, 3}, rng);
      const T3 b = random_tensor({4}, rng);
      const T3 y = conv3d(x, k, b, s, p);
      const T3 ref = naive_conv(x, k, b, s, p);
      ASSERT_EQ(y.shape, ref.shape);
      for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], ref.data[i], 1e-12);
    }
  }
}

TEST(Conv3d, ContractExamples) {
  std::mt19937_64 rng(2);
  const T3 x = random_tensor({1, 5, 4, 3}, rng);
  const T3 id({1, 1, 1, 1, 1}, 1.0);
  EXPECT_EQ(conv3d(x, id, T3({1}, 0.0), 1, 0).data, x.data);

  T3 impulse({1, 5, 5, 5});
  impulse.data[(2 * 5 + 2) * 5 + 2] = 1;
  const T3 box = conv3d(impulse, T3({1, 1, 3, 3, 3}, 1.0), T3({1}, 0.0), 1, 1);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int w = 0; w < 5; ++w) {
        const bool in = std::abs(z - 2) <= 1 && std::abs(y - 2) <= 1 && std::abs(w - 2) <= 1;
        EXPECT_EQ(box.data[(z * 5 + y) * 5 + w], in ? 1.0 : 0.0);
      }

  EXPECT_EQ(conv_output_extent(8, 3, 2, 1), 4);
  EXPECT_EQ(conv_transpose_output_extent(4, 3, 2, 1, 0), 7);
  EXPECT_EQ(conv_transpose_output_extent(4, 3, 2, 1, 1), 8);
  EXPECT_EQ(kind_of([&] { conv3d(x, T3({1, 2, 3, 3, 3}), T3({1}), 1, 1); }),
            ErrorKind::ShapeMismatch);
}

TEST(Conv3dTranspose, AdjointOfConv) {
  std::mt19937_64 rng(3);
  for (int s : {1, 2}) {
    const T3 x = random_tensor({3, 8, 6, 4}, rng);
    const T3 k = random_tensor({5, 3, 3, 3, 3}, rng);
    const T3 y = conv3d(x, k, T3({5}, 0.0), s, 1);
    const T3 r = random_tensor(y.shape, rng);
    const int op = s == 2 ? 1 : 0;
    const T3 back = conv3d_transpose(r, k, T3({3}, 0.0), s, 1, op);
    ASSERT_EQ(back.shape, x.shape);
    const double lhs = dot(y, r), rhs = dot(x, back);
    EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-6);
  }
}

TEST(Conv3dTranspose, ZeroKernelGivesBias) {
  const T3 x({2, 3, 3, 3}, 1.0);
  const T3 y = conv3d_transpose(x, T3({2, 4, 3, 3, 3}), T3({4}, std::vector<double>{1, 2, 3, 4}), 2, 1, 1);
  EXPECT_EQ(y.shape, (std::vector<int>{4, 6, 6, 6}));
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 216; ++i) ASSERT_EQ(y.data[c * 216 + i], c + 1.0);
}

TEST(Linear, Examples) {
  const T3 w({2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(linear(T3({2}, 1.0), w, T3({2}, 0.0)).data, (std::vector<double>{3, 7}));
  const T3 eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  const T3 x({3}, std::vector<double>{0.5, -2, 7});
  EXPECT_EQ(linear(x, eye, T3({3}, 0.0)).data, x.data);
  EXPECT_EQ(kind_of([&] { linear(T3({4}), w, T3({2})); }), ErrorKind::ShapeMismatch);
}

TEST(Activations, Examples) {
  const T3 x({2}, std::vector<double>{-1, 2});
  EXPECT_EQ(leaky_relu(x, 0.01).data, (std::vector<double>{-0.01, 2}));
  EXPECT_EQ(sigmoid_scalar(0.0), 0.5);
  for (double v : {40.0, -40.0, 800.0, -800.0}) {
    const double s = sigmoid_scalar(v);
    EXPECT_TRUE(std::isfinite(s));
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  EXPECT_GT(sigmoid_scalar(40.0), 0.5);
  EXPECT_GT(sigmoid_scalar(-40.0), 0.0);
  EXPECT_LT(sigmoid_scalar(40.0), 1.0);
  const float sf = sigmoid_scalar(-100.0f);
  EXPECT_TRUE(std::isfinite(sf));
}

TEST(Tensor, RejectsWrongDataLength) {
  EXPECT_EQ(kind_of([] { T3({2, 2}, std::vector<double>(3)); }), ErrorKind::ShapeMismatch);
}

TEST(Graph, SumOfParameterHasUnitGradient) {
  std::mt19937_64 rng(4);
  Parameter<double> p("p", random_tensor({3, 2}, rng));
  Graph<double> g;
  g.backward(g.sum(g.parameter(p)));
  for (double v : p.grad.data) EXPECT_EQ(v, 1.0);
}

TEST(Graph, BackwardTwiceDoublesGradients) {
  std::mt19937_64 rng(5);
  Parameter<double> k("k", random_tensor({2, 1, 3, 3, 3}, rng));
  Parameter<double> b("b", random_tensor({2}, rng));
  const T3 x = random_tensor({1, 4, 4, 4}, rng);
  auto run = [&] {
    Graph<double> g;
    Var y = g.conv3d(g.constant(x), g.parameter(k), g.parameter(b), 1, 1);
    g.backward(g.sum(g.sigmoid(y)));
  };
  run();
  const auto once_k = k.grad.data;
  const auto once_b = b.grad.data;
  run();
  for (std::size_t i = 0; i < once_k.size(); ++i) EXPECT_DOUBLE_EQ(k.grad.data[i], 2 * once_k[i]);
  for (std::size_t i = 0; i < once_b.size(); ++i) EXPECT_DOUBLE_EQ(b.grad.data[i], 2 * once_b[i]);
  k.zero_grad();
  for (double v : k.grad.data) EXPECT_EQ(v, 0.0);
}

TEST(Graph, FiniteDifferencesPerOperation) {
  std::mt19937_64 rng(6);
  const double h = 1e-5;
  {
    std::vector<Parameter<double>> ps{{"x", random_tensor({2, 5, 4, 6}, rng)},
                                      {"k", random_tensor({3, 2, 3, 3, 3}, rng)},
                                      {"b", random_tensor({3}, rng)}};
    for (int s : {1, 2}) {
      EXPECT_LT(max_fd_error(ps, [&](Graph<double>& g, std::vector<Var>& v) {
                  return g.conv3d(v[0], v[1], v[2], s, 1);
                }, h, 10 + s), 1e-5) << "conv3d stride " << s;
    }
  }
  {
    std::vector<Parameter<double>> ps{{"x", random_tensor({3, 3, 2, 4}, rng)},
                                      {"k", random_tensor({3, 2, 3, 3, 3}, rng)},
                                      {"b", random_tensor({2}, rng)}};
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.conv3d_transpose(v[0], v[1], v[2], 2, 1, 1);
              }, h, 20), 1e-5) << "conv3d_transpose";
  }
  {
    std::vector<Parameter<double>> ps{{"x", random_tensor({6}, rng)},
                                      {"w", random_tensor({4, 6}, rng)},
                                      {"b", random_tensor({4}, rng)}};
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.linear(v[0], v[1], v[2]);
              }, 1e-4, 30), 1e-5) << "linear";
  }
  {
    // Keep inputs away from the kink and the clamp bounds.
    T3 x = random_tensor({20}, rng);
    for (auto& v : x.data) v = (v >= 0 ? 0.1 : -0.1) + v;
    std::vector<Parameter<double>> ps{{"x", x}};
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.leaky_relu(v[0], 0.01);
              }, h, 40), 1e-6) << "leaky_relu";
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.sigmoid(v[0]);
              }, h, 41), 1e-6) << "sigmoid";
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.clamp(v[0], -0.05, 0.05);
              }, h, 42), 1e-6) << "clamp";
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.scale(g.add(g.slice(v[0], 3, 5), g.slice(v[0], 10, 5)), -1.5);
              }, h, 43), 1e-6) << "slice/add/scale";
  }
  {
    std::vector<Parameter<double>> ps{{"mu", random_tensor({4}, rng)},
                                      {"lv", random_tensor({4}, rng)}};
    const std::vector<double> eps{0.3, -1.2, 0.5, 2.0};
    EXPECT_LT(max_fd_error(ps, [&](Graph<double>& g, std::vector<Var>& v) {
                return g.reparameterize(v[0], v[1], eps);
              }, h, 50), 1e-6) << "reparameterize";
    EXPECT_LT(max_fd_error(ps, [](Graph<double>& g, std::vector<Var>& v) {
                return g.kl_gaussian(v[0], v[1]);
              }, h, 51), 1e-6) << "kl_gaussian";
  }
  {
    std::uniform_real_distribution<double> u(0.05, 0.95);
    T3 probs({12});
    for (auto& v : probs.data) v = u(rng);
    std::vector<Parameter<double>> ps{{"p", probs}};
    const std::vector<std::uint8_t> target{1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0};
    EXPECT_LT(max_fd_error(ps, [&](Graph<double>& g, std::vector<Var>& v) {
                return g.bernoulli_nll(v[0], target);
              }, 1e-6, 60), 1e-6) << "bernoulli_nll";
  }
}

TEST(Graph, ForwardIsDeterministic) {
  std::mt19937_64 rng(7);
  const T3 x = random_tensor({2, 9, 7, 5}, rng);
  const T3 k = random_tensor({4, 2, 3, 3, 3}, rng);
  const T3 b = random_tensor({4}, rng);
  EXPECT_EQ(conv3d(x, k, b, 2, 1).data, conv3d(x, k, b, 2, 1).data);
}

TEST(Sgd, ScheduleExamples) {
  SgdSchedule s;
  s.lr0 = 0.5;
  s.total_steps = 10;
  EXPECT_DOUBLE_EQ(s.learning_rate(0), 0.5);
  s.power = 1.0;
  EXPECT_DOUBLE_EQ(s.learning_rate(9), 0.5 / 10);
  EXPECT_EQ(kind_of([&] { s.learning_rate(10); }), ErrorKind::StepOverflow);
  SgdSchedule bad;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Sgd, QuadraticStep) {
  Parameter<double> w("w", T3({1}, 1.0));
  SgdSchedule s;
  s.lr0 = 0.1;
  s.momentum = 0;
  s.total_steps = 1'000'000'000;
  w.grad.data[0] = 2 * w.value.data[0];
  Parameter<double>* ps[] = {&w};
  sgd_step<double>(ps, s, 0);
  EXPECT_NEAR(w.value.data[0], 0.8, 1e-9);
  EXPECT_EQ(w.grad.data[0], 0.0);
}

TEST(Sgd, MomentumAndZeroGradient) {
  Parameter<double> w("w", T3({2}, std::vector<double>{1, -1}));
  SgdSchedule s;
  s.lr0 = 0.1;
  s.total_steps = 100;
  Parameter<double>* ps[] = {&w};
  sgd_step<double>(ps, s, 0);
  EXPECT_EQ(w.value.data, (std::vector<double>{1, -1}));
  w.grad.data = {1, 1};
  sgd_step<double>(ps, s, 0);
  EXPECT_DOUBLE_EQ(w.value.data[0], 0.9);
  w.grad.data = {0, 0};
  sgd_step<double>(ps, s, 1);
  // buffer is 0.9 now; lr(1) = 0.1 * 0.99^0.9
  EXPECT_NEAR(w.value.data[0], 0.9 - 0.1 * std::pow(0.99, 0.9) * 0.9, 1e-12);
}

TEST(Checkpoint, RoundTripAndMalformed) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "normshape_tests";
  fs::create_directories(dir);
  std::vector<NamedTensor> ts{{"enc.w", {2, 3}, {1, 2, 3, 4, 5, -6.5f}}, {"b", {1}, {0.25f}}};
  save_checkpoint(ts, dir / "a.nsckpt");
  const auto back = load_checkpoint(dir / "a.nsckpt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "enc.w");
  EXPECT_EQ(back[0].shape, ts[0].shape);
  EXPECT_EQ(back[0].data, ts[0].data);
  EXPECT_EQ(find_tensor(back, "b").data[0], 0.25f);
  EXPECT_EQ(kind_of([&] { find_tensor(back, "zzz"); }), ErrorKind::InvalidArgument);
  std::ifstream in(dir / "a.nsckpt", std::ios::binary);
  std::string head;
  std::getline(in, head);
  EXPECT_EQ(head, "NSCKPT 1");
  std::ofstream(dir / "bad.nsckpt") << "NSCKPT 2\n0\nBINARY\n";
  EXPECT_THROW(load_checkpoint(dir / "bad.nsckpt"), Error);
}
