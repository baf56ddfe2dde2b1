#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace normshape::nn {

/// Dense row-major tensor (last axis fastest).
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_, T fill = T(0));
  /// Throws ShapeMismatch when data length differs from the shape product.
  Tensor(std::vector<int> shape_, std::vector<T> data_);

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const { return shape[static_cast<std::size_t>(axis)]; }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

/// Trainable tensor with its gradient and momentum buffer.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum;

  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_);

  void zero_grad();
};

// Stateless kernels. Tensor layouts: volumes [C, D, H, W]; conv kernels
// [C_out, C_in, k, k, k]; transposed-conv kernels [C_in, C_out, k, k, k] (the
// kernel of the conv3d they are the adjoint of).

int conv_output_extent(int in, int k, int stride, int pad);
int conv_transpose_output_extent(int in, int k, int stride, int pad, int output_pad);

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int pad);

template <typename T>
Tensor<T> conv3d_transpose(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           int stride, int pad, int output_pad = 0);

/// weight [m, n] times the flattened input (n values) plus bias [m].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
T sigmoid_scalar(T x);

namespace detail {

/// Geometry of a strided convolution between a large grid and a small grid.
struct ConvGeometry {
  int channels = 0;  ///< channels of the large-grid tensor
  int d = 0, h = 0, w = 0;
  int k = 0, stride = 1, pad = 0;
  int od = 0, oh = 0, ow = 0;

  std::size_t rows() const { return static_cast<std::size_t>(channels) * k * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(od) * oh * ow; }
};

/// Fills columns for output depth slices [od_begin, od_end); `col` holds
/// rows() x (slices * oh * ow) values.
template <typename T>
void im2col(const T* input, const ConvGeometry& g, int od_begin, int od_end, T* col);

/// Adjoint of im2col: accumulates columns back into the large grid.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, int od_begin, int od_end, T* output);

/// Number of output depth slices per tile so a column tile stays cache-sized.
int slices_per_tile(const ConvGeometry& g);

/// c (m x n) = alpha * op(a) * op(b) + beta * c. Row-major operands with
/// leading dimensions (stored row lengths) lda, ldb, ldc.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc);

/// Tiled strided convolution kernels. Gradient outputs accumulate (+=);
/// pass nullptr to skip one.
template <typename T>
void conv_backward(const T* input, const T* kernel, const T* dout, int c_out,
                   const ConvGeometry& g, T* dkernel, T* dinput);
template <typename T>
void conv_transpose_backward(const T* input, const T* kernel, const T* dout, int c_in,
                             const ConvGeometry& g, T* dkernel, T* dinput);

/// Contiguous convenience overload.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, const T* b, T beta,
          T* c) {
  gemm(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

}  // namespace detail

}  // namespace normshape::nn
