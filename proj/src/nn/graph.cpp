#include "normshape/graph.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "normshape/error.hpp"

namespace normshape::nn {

template <typename T>
int Graph<T>::check(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw Error(ErrorKind::InvalidArgument, "variable does not belong to this graph");
  }
  return v.id;
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, std::vector<int> inputs,
                   std::function<void(Graph&, int)> backward) {
  const int id = static_cast<int>(nodes_.size());
  bool needs = false;
  for (int in : inputs) {
    // Inputs always precede the node being recorded, so no cycle can form.
    assert(in >= 0 && in < id);
    needs = needs || nodes_[in].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{id};
}

template <typename T>
T* Graph<T>::grad_of(int id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
  return n.grad.ptr();
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), {}, nullptr);
}

template <typename T>
Var Graph<T>::parameter(Parameter<T>& p) {
  Var v = push(p.value, {}, nullptr);
  nodes_[v.id].param = &p;
  nodes_[v.id].requires_grad = true;
  return v;
}

template <typename T>
Var Graph<T>::conv3d(Var x, Var kernel, Var bias, int stride, int pad) {
  const int xi = check(x), ki = check(kernel), bi = check(bias);
  Tensor<T> out = nn::conv3d(nodes_[xi].value, nodes_[ki].value, nodes_[bi].value, stride, pad);
  return push(std::move(out), {xi, ki, bi}, [=](Graph& g, int self) {
    const Tensor<T>& in = g.nodes_[xi].value;
    const Tensor<T>& w = g.nodes_[ki].value;
    const Tensor<T>& dout = g.nodes_[self].grad;
    const int k = w.dim(2);
    detail::ConvGeometry geo{in.dim(0), in.dim(1), in.dim(2), in.dim(3), k, stride, pad,
                             dout.dim(1), dout.dim(2), dout.dim(3)};
    const int c_out = w.dim(0);
    const int cols = static_cast<int>(geo.cols());
    if (T* db = g.grad_of(bi)) {
      for (int c = 0; c < c_out; ++c) {
        const T* d = dout.ptr() + static_cast<std::size_t>(c) * cols;
        T acc = 0;
        for (int i = 0; i < cols; ++i) acc += d[i];
        db[c] += acc;
      }
    }
    T* dw = g.grad_of(ki);
    T* dx = g.grad_of(xi);
    if (dw || dx) detail::conv_backward(in.ptr(), w.ptr(), dout.ptr(), c_out, geo, dw, dx);
  });
}

template <typename T>
Var Graph<T>::conv3d_transpose(Var x, Var kernel, Var bias, int stride, int pad, int output_pad) {
  const int xi = check(x), ki = check(kernel), bi = check(bias);
  Tensor<T> out = nn::conv3d_transpose(nodes_[xi].value, nodes_[ki].value, nodes_[bi].value,
                                       stride, pad, output_pad);
  return push(std::move(out), {xi, ki, bi}, [=](Graph& g, int self) {
    const Tensor<T>& in = g.nodes_[xi].value;
    const Tensor<T>& w = g.nodes_[ki].value;
    const Tensor<T>& dout = g.nodes_[self].grad;
    const int k = w.dim(2);
    const int c_in = w.dim(0);
    const int c_out = w.dim(1);
    detail::ConvGeometry geo{c_out, dout.dim(1), dout.dim(2), dout.dim(3), k, stride, pad,
                             in.dim(1), in.dim(2), in.dim(3)};
    if (T* db = g.grad_of(bi)) {
      const std::size_t vox = static_cast<std::size_t>(geo.d) * geo.h * geo.w;
      for (int c = 0; c < c_out; ++c) {
        const T* d = dout.ptr() + c * vox;
        T acc = 0;
        for (std::size_t i = 0; i < vox; ++i) acc += d[i];
        db[c] += acc;
      }
    }
    T* dw = g.grad_of(ki);
    T* dx = g.grad_of(xi);
    if (!dw && !dx) return;
    detail::conv_transpose_backward(in.ptr(), w.ptr(), dout.ptr(), c_in, geo, dw, dx);
  });
}

template <typename T>
Var Graph<T>::linear(Var x, Var weight, Var bias) {
  const int xi = check(x), wi = check(weight), bi = check(bias);
  Tensor<T> out = nn::linear(nodes_[xi].value, nodes_[wi].value, nodes_[bi].value);
  return push(std::move(out), {xi, wi, bi}, [=](Graph& g, int self) {
    const Tensor<T>& in = g.nodes_[xi].value;
    const Tensor<T>& w = g.nodes_[wi].value;
    const T* dout = g.nodes_[self].grad.ptr();
    const int m = w.dim(0);
    const int n = w.dim(1);
    if (T* db = g.grad_of(bi)) {
      for (int i = 0; i < m; ++i) db[i] += dout[i];
    }
    if (T* dw = g.grad_of(wi)) {
      detail::gemm<T>(false, false, m, n, 1, T(1), dout, in.ptr(), T(1), dw);
    }
    if (T* dx = g.grad_of(xi)) {
      detail::gemm<T>(true, false, n, 1, m, T(1), w.ptr(), dout, T(1), dx);
    }
  });
}

template <typename T>
Var Graph<T>::leaky_relu(Var x, T slope) {
  const int xi = check(x);
  Tensor<T> out = nn::leaky_relu(nodes_[xi].value, slope);
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& in = g.nodes_[xi].value;
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < in.size(); ++i) {
      dx[i] += in.data[i] > T(0) ? dout.data[i] : slope * dout.data[i];
    }
  });
}

template <typename T>
Var Graph<T>::sigmoid(Var x) {
  const int xi = check(x);
  Tensor<T> out = nn::sigmoid(nodes_[xi].value);
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& y = g.nodes_[self].value;
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < y.size(); ++i) {
      dx[i] += dout.data[i] * y.data[i] * (T(1) - y.data[i]);
    }
  });
}

template <typename T>
Var Graph<T>::clamp(Var x, T lo, T hi) {
  const int xi = check(x);
  Tensor<T> out = nodes_[xi].value;
  for (T& v : out.data) v = std::clamp(v, lo, hi);
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& in = g.nodes_[xi].value;
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in.data[i] >= lo && in.data[i] <= hi) dx[i] += dout.data[i];
    }
  });
}

template <typename T>
Var Graph<T>::reshape(Var x, std::vector<int> shape) {
  const int xi = check(x);
  Tensor<T> out(std::move(shape), nodes_[xi].value.data);
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout.data[i];
  });
}

template <typename T>
Var Graph<T>::slice(Var x, std::size_t begin, std::size_t count) {
  const int xi = check(x);
  const Tensor<T>& in = nodes_[xi].value;
  if (count == 0 || begin + count > in.size()) {
    throw Error(ErrorKind::ShapeMismatch, "slice out of range");
  }
  Tensor<T> out({static_cast<int>(count)},
                std::vector<T>(in.data.begin() + static_cast<std::ptrdiff_t>(begin),
                               in.data.begin() + static_cast<std::ptrdiff_t>(begin + count)));
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < count; ++i) dx[begin + i] += dout.data[i];
  });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const int ai = check(a), bi = check(b);
  if (nodes_[ai].value.size() != nodes_[bi].value.size()) {
    throw Error(ErrorKind::ShapeMismatch, "add operands differ in size");
  }
  Tensor<T> out = nodes_[ai].value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += nodes_[bi].value.data[i];
  return push(std::move(out), {ai, bi}, [=](Graph& g, int self) {
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (int id : {ai, bi}) {
      if (T* d = g.grad_of(id)) {
        for (std::size_t i = 0; i < dout.size(); ++i) d[i] += dout.data[i];
      }
    }
  });
}

template <typename T>
Var Graph<T>::scale(Var x, T alpha) {
  const int xi = check(x);
  Tensor<T> out = nodes_[xi].value;
  for (T& v : out.data) v *= alpha;
  return push(std::move(out), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const Tensor<T>& dout = g.nodes_[self].grad;
    for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += alpha * dout.data[i];
  });
}

template <typename T>
Var Graph<T>::sum(Var x) {
  const int xi = check(x);
  T acc = 0;
  for (T v : nodes_[xi].value.data) acc += v;
  return push(Tensor<T>({1}, {acc}), {xi}, [=](Graph& g, int self) {
    T* dx = g.grad_of(xi);
    const T d = g.nodes_[self].grad.data[0];
    const std::size_t n = g.nodes_[xi].value.size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += d;
  });
}

template <typename T>
Var Graph<T>::reparameterize(Var mu, Var logvar, const std::vector<T>& eps) {
  const int mi = check(mu), li = check(logvar);
  const Tensor<T>& m = nodes_[mi].value;
  const Tensor<T>& lv = nodes_[li].value;
  if (m.size() != lv.size() || eps.size() != m.size()) {
    throw Error(ErrorKind::ShapeMismatch, "reparameterize operand lengths differ");
  }
  Tensor<T> out = m;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += std::exp(lv.data[i] / 2) * eps[i];
  return push(std::move(out), {mi, li}, [=](Graph& g, int self) {
    const Tensor<T>& dout = g.nodes_[self].grad;
    const Tensor<T>& lvv = g.nodes_[li].value;
    if (T* dm = g.grad_of(mi)) {
      for (std::size_t i = 0; i < dout.size(); ++i) dm[i] += dout.data[i];
    }
    if (T* dl = g.grad_of(li)) {
      for (std::size_t i = 0; i < dout.size(); ++i) {
        dl[i] += dout.data[i] * eps[i] * std::exp(lvv.data[i] / 2) / 2;
      }
    }
  });
}

template <typename T>
Var Graph<T>::kl_gaussian(Var mu, Var logvar) {
  const int mi = check(mu), li = check(logvar);
  const Tensor<T>& m = nodes_[mi].value;
  const Tensor<T>& lv = nodes_[li].value;
  if (m.size() != lv.size()) throw Error(ErrorKind::ShapeMismatch, "kl operand lengths differ");
  T acc = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    acc += m.data[i] * m.data[i] + std::exp(lv.data[i]) - T(1) - lv.data[i];
  }
  return push(Tensor<T>({1}, {acc / 2}), {mi, li}, [=](Graph& g, int self) {
    const T d = g.nodes_[self].grad.data[0];
    const Tensor<T>& mv = g.nodes_[mi].value;
    const Tensor<T>& lvv = g.nodes_[li].value;
    if (T* dm = g.grad_of(mi)) {
      for (std::size_t i = 0; i < mv.size(); ++i) dm[i] += d * mv.data[i];
    }
    if (T* dl = g.grad_of(li)) {
      for (std::size_t i = 0; i < lvv.size(); ++i) dl[i] += d * (std::exp(lvv.data[i]) - T(1)) / 2;
    }
  });
}

template <typename T>
Var Graph<T>::bernoulli_nll(Var probs, const std::vector<std::uint8_t>& targets) {
  const int pi = check(probs);
  const Tensor<T>& p = nodes_[pi].value;
  if (p.size() != targets.size()) {
    throw Error(ErrorKind::DimMismatch, "probability map and mask differ in size");
  }
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc -= targets[i] ? std::log(p.data[i]) : std::log(T(1) - p.data[i]);
  }
  return push(Tensor<T>({1}, {acc}), {pi}, [=](Graph& g, int self) {
    const T d = g.nodes_[self].grad.data[0];
    const Tensor<T>& pv = g.nodes_[pi].value;
    T* dp = g.grad_of(pi);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      dp[i] += targets[i] ? -d / pv.data[i] : d / (T(1) - pv.data[i]);
    }
  });
}

template <typename T>
void Graph<T>::backward_local(Var loss) {
  const int li = check(loss);
  if (nodes_[li].value.size() != 1) {
    throw Error(ErrorKind::ShapeMismatch, "backward needs a scalar loss");
  }
  if (!nodes_[li].requires_grad) return;
  for (Node& n : nodes_) n.grad = Tensor<T>();
  grad_of(li)[0] = T(1);
  for (int id = li; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.data.empty()) continue;
    n.backward(*this, id);
  }
}

template <typename T>
void Graph<T>::accumulate_parameter_grads() {
  for (Node& n : nodes_) {
    if (!n.param || n.grad.data.empty()) continue;
    T* dst = n.param->grad.ptr();
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad.data[i];
  }
}

template <typename T>
void Graph<T>::backward(Var loss) {
  backward_local(loss);
  accumulate_parameter_grads();
}

template class Graph<float>;
template class Graph<double>;

}  // namespace normshape::nn
