#include <Eigen/Core>
#include <algorithm>
#include <stdexcept>

#include "dlf/gridnet/ops.hpp"

namespace dlf::gridnet {

namespace {

// Geometry of a strided cross-correlation from an "image" grid to a
// "response" grid. col rows are (channel, kz, ky, kx), columns are response
// voxels; the GEMM with the weight matrix does the rest.
struct Geometry {
  int channels;  // image channels
  int id, ih, iw;  // image extents
  int od, oh, ow;  // response extents
  int k, stride, pad;

  int rows() const { return channels * k * k * k; }
  std::size_t plane() const { return static_cast<std::size_t>(oh) * ow; }
};

int out_extent(int n, int k, int stride, int pad) { return (n + 2 * pad - k) / stride + 1; }

// Response z-slices per GEMM chunk, bounding the col buffer to ~4M entries.
int chunk_depth(const Geometry& g) {
  const std::size_t per_slice = static_cast<std::size_t>(g.rows()) * g.plane();
  return std::max(1, static_cast<int>(std::min<std::size_t>(g.od, (std::size_t{1} << 22) / std::max<std::size_t>(1, per_slice))));
}

template <typename T>
void im2col(const Geometry& g, const T* img, int z0, int z1, T* col) {
  const std::size_t ncols = static_cast<std::size_t>(z1 - z0) * g.plane();
  const std::size_t img_plane = static_cast<std::size_t>(g.ih) * g.iw;
  for (int c = 0; c < g.channels; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const int row = ((c * g.k + kz) * g.k + ky) * g.k + kx;
          T* dst = col + static_cast<std::size_t>(row) * ncols;
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride + kz - g.pad;
            for (int oy = 0; oy < g.oh; ++oy, dst += g.ow) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iz < 0 || iz >= g.id || iy < 0 || iy >= g.ih) {
                std::fill(dst, dst + g.ow, T(0));
                continue;
              }
              const T* src = img + (static_cast<std::size_t>(c) * g.id + iz) * img_plane +
                             static_cast<std::size_t>(iy) * g.iw;
              if (g.stride == 1) {
                const int shift = kx - g.pad;
                const int lo = std::max(0, -shift);
                const int hi = std::min(g.ow, g.iw - shift);
                std::fill(dst, dst + std::max(0, lo), T(0));
                if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
                std::fill(dst + std::max(lo, hi), dst + g.ow, T(0));
              } else {
                for (int ox = 0; ox < g.ow; ++ox) {
                  const int ix = ox * g.stride + kx - g.pad;
                  dst[ox] = (ix >= 0 && ix < g.iw) ? src[ix] : T(0);
                }
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const Geometry& g, const T* col, int z0, int z1, T* img) {
  const std::size_t ncols = static_cast<std::size_t>(z1 - z0) * g.plane();
  const std::size_t img_plane = static_cast<std::size_t>(g.ih) * g.iw;
  for (int c = 0; c < g.channels; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const int row = ((c * g.k + kz) * g.k + ky) * g.k + kx;
          const T* src = col + static_cast<std::size_t>(row) * ncols;
          for (int oz = z0; oz < z1; ++oz) {
            const int iz = oz * g.stride + kz - g.pad;
            for (int oy = 0; oy < g.oh; ++oy, src += g.ow) {
              const int iy = oy * g.stride + ky - g.pad;
              if (iz < 0 || iz >= g.id || iy < 0 || iy >= g.ih) continue;
              T* dst = img + (static_cast<std::size_t>(c) * g.id + iz) * img_plane +
                       static_cast<std::size_t>(iy) * g.iw;
              for (int ox = 0; ox < g.ow; ++ox) {
                const int ix = ox * g.stride + kx - g.pad;
                if (ix >= 0 && ix < g.iw) dst[ix] += src[ox];
              }
            }
          }
        }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// response[R x V] (+)= A[R x K] * im2col(image)[K x V], K = geometry rows.
template <typename T>
void correlate(const Geometry& g, const T* image, const T* a, int r, T* response, bool accumulate) {
  const std::size_t total = static_cast<std::size_t>(g.od) * g.plane();
  const int step = chunk_depth(g);
  std::vector<T> col;
  MapC<T> A(a, r, g.rows(), Eigen::OuterStride<>(g.rows()));
  for (int z0 = 0; z0 < g.od; z0 += step) {
    const int z1 = std::min(g.od, z0 + step);
    const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.plane();
    col.resize(static_cast<std::size_t>(g.rows()) * n);
    im2col(g, image, z0, z1, col.data());
    MapC<T> C(col.data(), g.rows(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
    MapM<T> out(response + static_cast<std::size_t>(z0) * g.plane(), r, static_cast<Eigen::Index>(n),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    if (accumulate)
      out.noalias() += A * C;
    else
      out.noalias() = A * C;
  }
}

// grad_a[R x K] += response[R x V] * im2col(image)^T
template <typename T>
void correlate_weight_grad(const Geometry& g, const T* image, const T* response, int r, T* grad_a) {
  const std::size_t total = static_cast<std::size_t>(g.od) * g.plane();
  const int step = chunk_depth(g);
  std::vector<T> col;
  MapM<T> GA(grad_a, r, g.rows(), Eigen::OuterStride<>(g.rows()));
  for (int z0 = 0; z0 < g.od; z0 += step) {
    const int z1 = std::min(g.od, z0 + step);
    const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.plane();
    col.resize(static_cast<std::size_t>(g.rows()) * n);
    im2col(g, image, z0, z1, col.data());
    MapC<T> C(col.data(), g.rows(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
    MapC<T> R(response + static_cast<std::size_t>(z0) * g.plane(), r, static_cast<Eigen::Index>(n),
              Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    GA.noalias() += R * C.transpose();
  }
}

// image += col2im(A^T[K x R] * response[R x V])
template <typename T>
void correlate_adjoint(const Geometry& g, const T* response, const T* a, int r, T* image) {
  const std::size_t total = static_cast<std::size_t>(g.od) * g.plane();
  const int step = chunk_depth(g);
  std::vector<T> col;
  MapC<T> A(a, r, g.rows(), Eigen::OuterStride<>(g.rows()));
  for (int z0 = 0; z0 < g.od; z0 += step) {
    const int z1 = std::min(g.od, z0 + step);
    const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.plane();
    col.resize(static_cast<std::size_t>(g.rows()) * n);
    MapC<T> R(response + static_cast<std::size_t>(z0) * g.plane(), r, static_cast<Eigen::Index>(n),
              Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    MapM<T> C(col.data(), g.rows(), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(static_cast<Eigen::Index>(n)));
    C.noalias() = A.transpose() * R;
    col2im_add(g, col.data(), z0, z1, image);
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  require_rank(x.shape(), 4, "conv3d input");
  require_rank(w.shape(), 5, "conv3d weight");
  const int cin = x.dim(0), cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw std::invalid_argument("conv3d: channel mismatch, input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
  if (w.dim(3) != k || w.dim(4) != k) throw std::invalid_argument("conv3d: kernel must be cubic");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv3d: bad stride/padding");
  if (b.defined() && (b.numel() != static_cast<std::size_t>(cout))) throw std::invalid_argument("conv3d: bias size mismatch");
  Geometry g{cin, x.dim(1), x.dim(2), x.dim(3),
             out_extent(x.dim(1), k, stride, pad), out_extent(x.dim(2), k, stride, pad), out_extent(x.dim(3), k, stride, pad),
             k, stride, pad};
  if (g.od < 1 || g.oh < 1 || g.ow < 1) throw std::invalid_argument("conv3d: kernel larger than padded input");

  const std::size_t vox = static_cast<std::size_t>(g.od) * g.plane();
  std::vector<T> out(static_cast<std::size_t>(cout) * vox);
  correlate(g, x.values().data(), w.values().data(), cout, out.data(), false);
  if (b.defined())
    for (int c = 0; c < cout; ++c)
      std::for_each(out.begin() + static_cast<std::ptrdiff_t>(c * vox), out.begin() + static_cast<std::ptrdiff_t>((c + 1) * vox),
                    [v = b.values()[c]](T& o) { o += v; });

  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return Tensor<T>::make_result(
      {cout, g.od, g.oh, g.ow}, std::move(out), parents, [g, cout, vox](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        const T* dy = self.grad.data();
        if (wn.requires_grad) correlate_weight_grad(g, xn.value.data(), dy, cout, wn.ensure_grad().data());
        if (xn.requires_grad) correlate_adjoint(g, dy, wn.value.data(), cout, xn.ensure_grad().data());
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (int c = 0; c < cout; ++c) {
            T s = T(0);
            for (std::size_t i = 0; i < vox; ++i) s += dy[static_cast<std::size_t>(c) * vox + i];
            gb[c] += s;
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x.shape(), 4, "conv_transpose3d input");
  require_rank(w.shape(), 5, "conv_transpose3d weight");
  const int cin = x.dim(0), cout = w.dim(1);
  if (w.dim(0) != cin) throw std::invalid_argument("conv_transpose3d: channel mismatch, input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
  if (w.dim(2) != 3 || w.dim(3) != 3 || w.dim(4) != 3) throw std::invalid_argument("conv_transpose3d: kernel must be 3x3x3");
  if (b.defined() && b.numel() != static_cast<std::size_t>(cout)) throw std::invalid_argument("conv_transpose3d: bias size mismatch");
  // Viewed as the strided correlation from the doubled grid back to x's grid.
  Geometry g{cout, 2 * x.dim(1), 2 * x.dim(2), 2 * x.dim(3), x.dim(1), x.dim(2), x.dim(3), 3, 2, 1};
  const std::size_t vox = static_cast<std::size_t>(g.id) * g.ih * g.iw;
  std::vector<T> out(static_cast<std::size_t>(cout) * vox, T(0));
  correlate_adjoint(g, x.values().data(), w.values().data(), cin, out.data());
  if (b.defined())
    for (int c = 0; c < cout; ++c)
      std::for_each(out.begin() + static_cast<std::ptrdiff_t>(c * vox), out.begin() + static_cast<std::ptrdiff_t>((c + 1) * vox),
                    [v = b.values()[c]](T& o) { o += v; });

  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return Tensor<T>::make_result(
      {cout, g.id, g.ih, g.iw}, std::move(out), parents, [g, cin, cout, vox](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        const T* dy = self.grad.data();
        if (xn.requires_grad) correlate(g, dy, wn.value.data(), cin, xn.ensure_grad().data(), true);
        if (wn.requires_grad) correlate_weight_grad(g, dy, xn.value.data(), cin, wn.ensure_grad().data());
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (int c = 0; c < cout; ++c) {
            T s = T(0);
            for (std::size_t i = 0; i < vox; ++i) s += dy[static_cast<std::size_t>(c) * vox + i];
            gb[c] += s;
          }
        }
      });
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int, int);
template Tensor<float> conv_transpose3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> conv_transpose3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace dlf::gridnet
