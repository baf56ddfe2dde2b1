#include "normshape/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

#include "normshape/error.hpp"

namespace normshape::nn {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw Error(ErrorKind::ShapeMismatch, "non-positive extent in " + shape_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
  ss << ']';
  return ss.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape_, T fill)
    : shape(std::move(shape_)), data(shape_size(shape), fill) {}

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape_, std::vector<T> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  if (data.size() != shape_size(shape)) {
    throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data.size()) +
                                              " does not match shape " + shape_string(shape));
  }
}

template <typename T>
Parameter<T>::Parameter(std::string name_, Tensor<T> value_)
    : name(std::move(name_)),
      value(std::move(value_)),
      grad(value.shape),
      momentum(value.shape) {}

template <typename T>
void Parameter<T>::zero_grad() {
  std::fill(grad.data.begin(), grad.data.end(), T(0));
}

int conv_output_extent(int in, int k, int stride, int pad) {
  const int span = in + 2 * pad - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

int conv_transpose_output_extent(int in, int k, int stride, int pad, int output_pad) {
  return (in - 1) * stride - 2 * pad + k + output_pad;
}

namespace detail {

int slices_per_tile(const ConvGeometry& g) {
  constexpr std::size_t kTileElements = 1 << 17;
  const std::size_t per_slice = g.rows() * static_cast<std::size_t>(g.oh) * g.ow;
  return static_cast<int>(std::clamp<std::size_t>(kTileElements / std::max<std::size_t>(per_slice, 1),
                                                  1, static_cast<std::size_t>(g.od)));
}

namespace {

// Output columns [lo, hi) whose input column ow * stride - pad + kw is inside the grid.
std::pair<int, int> valid_range(const ConvGeometry& g, int kw) {
  const int off = kw - g.pad;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = g.w - 1 - off < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  lo = std::min(lo, g.ow);
  hi = std::clamp(hi, lo, g.ow);
  return {lo, hi};
}

}  // namespace

template <typename T>
void im2col(const T* input, const ConvGeometry& g, int od_begin, int od_end, T* col) {
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t cols = plane * static_cast<std::size_t>(od_end - od_begin);
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const T* src_c = input + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          T* dst = col + row * cols;
          for (int od = od_begin; od < od_end; ++od) {
            const int id = od * g.stride - g.pad + kd;
            T* dst_d = dst + (od - od_begin) * plane;
            if (id < 0 || id >= g.d) {
              std::fill(dst_d, dst_d + plane, T(0));
              continue;
            }
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              T* out = dst_d + static_cast<std::size_t>(oh) * g.ow;
              if (ih < 0 || ih >= g.h) {
                std::fill(out, out + g.ow, T(0));
                continue;
              }
              const T* src = src_c + (static_cast<std::size_t>(id) * g.h + ih) * g.w;
              const auto [lo, hi] = valid_range(g, kw);
              std::fill(out, out + lo, T(0));
              const int off = -g.pad + kw;
              if (g.stride == 1) {
                std::copy(src + lo + off, src + hi + off, out + lo);
              } else {
                for (int ow = lo; ow < hi; ++ow) out[ow] = src[ow * g.stride + off];
              }
              std::fill(out + hi, out + g.ow, T(0));
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, int od_begin, int od_end, T* output) {
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t cols = plane * static_cast<std::size_t>(od_end - od_begin);
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    T* dst_c = output + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kd = 0; kd < g.k; ++kd) {
      for (int kh = 0; kh < g.k; ++kh) {
        for (int kw = 0; kw < g.k; ++kw, ++row) {
          const T* src = col + row * cols;
          for (int od = od_begin; od < od_end; ++od) {
            const int id = od * g.stride - g.pad + kd;
            if (id < 0 || id >= g.d) continue;
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.h) continue;
              T* out = dst_c + (static_cast<std::size_t>(id) * g.h + ih) * g.w;
              const T* in = src + (od - od_begin) * plane + static_cast<std::size_t>(oh) * g.ow;
              const auto [lo, hi] = valid_range(g, kw);
              const int off = -g.pad + kw;
              if (g.stride == 1) {
                T* o = out + off;
                for (int ow = lo; ow < hi; ++ow) o[ow] += in[ow];
              } else {
                for (int ow = lo; ow < hi; ++ow) out[ow * g.stride + off] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  Eigen::Map<Mat, 0, Stride> cm(c, m, n, Stride(ldc));
  if (beta == T(0)) {
    cm.setZero();
  } else if (beta != T(1)) {
    cm *= beta;
  }
  const CMap am(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
  const CMap bm(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
  if (!trans_a && !trans_b) {
    cm.noalias() += alpha * am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += alpha * am * bm.transpose();
  } else {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

template <typename T>
void conv_forward(const T* input, const T* kernel, int c_out, const ConvGeometry& g, T* out) {
  const int rows = static_cast<int>(g.rows());
  const int plane = g.oh * g.ow;
  const int total = static_cast<int>(g.cols());
  const int tile = slices_per_tile(g);
  std::vector<T> col(g.rows() * static_cast<std::size_t>(tile) * plane);
  for (int a = 0; a < g.od; a += tile) {
    const int b = std::min(g.od, a + tile);
    const int nt = (b - a) * plane;
    im2col(input, g, a, b, col.data());
    gemm<T>(false, false, c_out, nt, rows, T(1), kernel, rows, col.data(), nt, T(0),
            out + static_cast<std::size_t>(a) * plane, total);
  }
}

template <typename T>
void conv_backward(const T* input, const T* kernel, const T* dout, int c_out,
                   const ConvGeometry& g, T* dkernel, T* dinput) {
  const int rows = static_cast<int>(g.rows());
  const int plane = g.oh * g.ow;
  const int total = static_cast<int>(g.cols());
  const int tile = slices_per_tile(g);
  std::vector<T> col(g.rows() * static_cast<std::size_t>(tile) * plane);
  for (int a = 0; a < g.od; a += tile) {
    const int b = std::min(g.od, a + tile);
    const int nt = (b - a) * plane;
    const T* dout_tile = dout + static_cast<std::size_t>(a) * plane;
    if (dkernel) {
      im2col(input, g, a, b, col.data());
      gemm<T>(false, true, c_out, rows, nt, T(1), dout_tile, total, col.data(), nt, T(1), dkernel,
              rows);
    }
    if (dinput) {
      gemm<T>(true, false, rows, nt, c_out, T(1), kernel, rows, dout_tile, total, T(0), col.data(),
              nt);
      col2im(col.data(), g, a, b, dinput);
    }
  }
}

template <typename T>
void conv_transpose_forward(const T* input, const T* kernel, int c_in, const ConvGeometry& g,
                            T* out) {
  const int rows = static_cast<int>(g.rows());
  const int plane = g.oh * g.ow;
  const int total = static_cast<int>(g.cols());
  const int tile = slices_per_tile(g);
  std::vector<T> col(g.rows() * static_cast<std::size_t>(tile) * plane);
  for (int a = 0; a < g.od; a += tile) {
    const int b = std::min(g.od, a + tile);
    const int nt = (b - a) * plane;
    gemm<T>(true, false, rows, nt, c_in, T(1), kernel, rows,
            input + static_cast<std::size_t>(a) * plane, total, T(0), col.data(), nt);
    col2im(col.data(), g, a, b, out);
  }
}

template <typename T>
void conv_transpose_backward(const T* input, const T* kernel, const T* dout, int c_in,
                             const ConvGeometry& g, T* dkernel, T* dinput) {
  const int rows = static_cast<int>(g.rows());
  const int plane = g.oh * g.ow;
  const int total = static_cast<int>(g.cols());
  const int tile = slices_per_tile(g);
  std::vector<T> col(g.rows() * static_cast<std::size_t>(tile) * plane);
  for (int a = 0; a < g.od; a += tile) {
    const int b = std::min(g.od, a + tile);
    const int nt = (b - a) * plane;
    im2col(dout, g, a, b, col.data());
    if (dkernel) {
      gemm<T>(false, true, c_in, rows, nt, T(1), input + static_cast<std::size_t>(a) * plane, total,
              col.data(), nt, T(1), dkernel, rows);
    }
    if (dinput) {
      gemm<T>(false, false, c_in, nt, rows, T(1), kernel, rows, col.data(), nt, T(1),
              dinput + static_cast<std::size_t>(a) * plane, total);
    }
  }
}

}  // namespace detail

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::ShapeMismatch, what);
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int pad) {
  require(input.rank() == 4, "conv3d input must be [C,D,H,W], got " + shape_string(input.shape));
  require(kernel.rank() == 5, "conv3d kernel must be rank 5");
  const int k = kernel.dim(2);
  require(kernel.dim(3) == k && kernel.dim(4) == k && k % 2 == 1, "conv3d kernel must be odd cube");
  require(kernel.dim(1) == input.dim(0), "conv3d channel mismatch");
  require(bias.rank() == 1 && bias.dim(0) == kernel.dim(0), "conv3d bias mismatch");
  require(stride >= 1 && pad >= 0, "conv3d stride/pad invalid");
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), k, stride, pad,
                         conv_output_extent(input.dim(1), k, stride, pad),
                         conv_output_extent(input.dim(2), k, stride, pad),
                         conv_output_extent(input.dim(3), k, stride, pad)};
  require(g.od >= 1 && g.oh >= 1 && g.ow >= 1, "conv3d output would be empty");
  const int c_out = kernel.dim(0);
  Tensor<T> out({c_out, g.od, g.oh, g.ow});
  detail::conv_forward(input.ptr(), kernel.ptr(), c_out, g, out.ptr());
  for (int c = 0; c < c_out; ++c) {
    T* o = out.ptr() + c * g.cols();
    for (std::size_t i = 0; i < g.cols(); ++i) o[i] += bias.data[c];
  }
  return out;
}

template <typename T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           int stride, int pad, int output_pad) {
  require(input.rank() == 4, "conv3d_transpose input must be [C,D,H,W]");
  require(kernel.rank() == 5, "conv3d_transpose kernel must be rank 5");
  const int k = kernel.dim(2);
  require(kernel.dim(3) == k && kernel.dim(4) == k && k % 2 == 1, "kernel must be odd cube");
  require(kernel.dim(0) == input.dim(0), "conv3d_transpose channel mismatch");
  const int c_out = kernel.dim(1);
  require(bias.rank() == 1 && bias.dim(0) == c_out, "conv3d_transpose bias mismatch");
  require(stride >= 1 && pad >= 0 && output_pad >= 0 && output_pad < stride,
          "conv3d_transpose stride/pad invalid");
  detail::ConvGeometry g{c_out,
                         conv_transpose_output_extent(input.dim(1), k, stride, pad, output_pad),
                         conv_transpose_output_extent(input.dim(2), k, stride, pad, output_pad),
                         conv_transpose_output_extent(input.dim(3), k, stride, pad, output_pad),
                         k, stride, pad, input.dim(1), input.dim(2), input.dim(3)};
  require(g.d >= 1 && g.h >= 1 && g.w >= 1, "conv3d_transpose output would be empty");
  require(conv_output_extent(g.d, k, stride, pad) == g.od &&
              conv_output_extent(g.h, k, stride, pad) == g.oh &&
              conv_output_extent(g.w, k, stride, pad) == g.ow,
          "conv3d_transpose geometry is not the adjoint of a conv3d");
  Tensor<T> out({c_out, g.d, g.h, g.w});
  detail::conv_transpose_forward(input.ptr(), kernel.ptr(), input.dim(0), g, out.ptr());
  const std::size_t vox = static_cast<std::size_t>(g.d) * g.h * g.w;
  for (int c = 0; c < c_out; ++c) {
    T* o = out.ptr() + c * vox;
    for (std::size_t i = 0; i < vox; ++i) o[i] += bias.data[c];
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(weight.rank() == 2, "linear weight must be [m,n]");
  const int m = weight.dim(0);
  const int n = weight.dim(1);
  require(static_cast<int>(input.size()) == n, "linear input length mismatch");
  require(bias.rank() == 1 && bias.dim(0) == m, "linear bias mismatch");
  Tensor<T> out({m});
  detail::gemm<T>(false, false, m, 1, n, T(1), weight.ptr(), input.ptr(), T(0), out.ptr());
  for (int i = 0; i < m; ++i) out.data[i] += bias.data[i];
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out = x;
  for (T& v : out.data) v = v > T(0) ? v : slope * v;
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  // Kept strictly inside (0, 1) even where the exact value rounds to 0 or 1.
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  if (x >= T(0)) return std::min(hi, T(1) / (T(1) + std::exp(-x)));
  const T e = std::exp(x);
  return std::max(lo, e / (T(1) + e));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data) v = sigmoid_scalar(v);
  return out;
}

#define NORMSHAPE_INSTANTIATE(T)                                                              \
  template struct Tensor<T>;                                                                  \
  template struct Parameter<T>;                                                               \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> conv3d_transpose(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      int, int, int);                                         \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template T sigmoid_scalar(T);                                                               \
  template void detail::im2col(const T*, const detail::ConvGeometry&, int, int, T*);          \
  template void detail::col2im(const T*, const detail::ConvGeometry&, int, int, T*);          \
  template void detail::gemm(bool, bool, int, int, int, T, const T*, int, const T*, int, T, T*, \
                             int);                                                            \
  template void detail::conv_backward(const T*, const T*, const T*, int,                      \
                                      const detail::ConvGeometry&, T*, T*);                   \
  template void detail::conv_transpose_backward(const T*, const T*, const T*, int,            \
                                                const detail::ConvGeometry&, T*, T*);

NORMSHAPE_INSTANTIATE(float)
NORMSHAPE_INSTANTIATE(double)

#undef NORMSHAPE_INSTANTIATE

}  // namespace normshape::nn
