#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <vector>

#include "lungdet/nn/tape.hpp"

namespace lungdet::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// "same" padding split, TensorFlow convention: total = max((ceil(n/s)-1)*s+k-n, 0),
/// leading pad = total/2 (rounded down).
struct AxisGeom {
  int in = 0, out = 0, k = 0, stride = 1, pad0 = 0;
};

inline AxisGeom same_axis(int n, int k, int stride) {
  AxisGeom g;
  g.in = n;
  g.k = k;
  g.stride = stride;
  g.out = (n + stride - 1) / stride;
  const int total = std::max((g.out - 1) * stride + k - n, 0);
  g.pad0 = total / 2;
  return g;
}

namespace detail {

// col is (K x M) with K = C*prod(k), M = prod(out); gather with zero padding.
template <typename T>
void im2col_2d(const T* x, int C, const AxisGeom& gh, const AxisGeom& gw, T* col) {
  const int M = gh.out * gw.out;
  int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<int64_t>(c) * gh.in * gw.in;
    for (int ky = 0; ky < gh.k; ++ky) {
      for (int kx = 0; kx < gw.k; ++kx, ++row) {
        T* dst = col + row * M;
        for (int oy = 0; oy < gh.out; ++oy) {
          const int iy = oy * gh.stride + ky - gh.pad0;
          if (iy < 0 || iy >= gh.in) {
            for (int ox = 0; ox < gw.out; ++ox) dst[oy * gw.out + ox] = T(0);
            continue;
          }
          const T* src = xc + static_cast<int64_t>(iy) * gw.in;
          for (int ox = 0; ox < gw.out; ++ox) {
            const int ix = ox * gw.stride + kx - gw.pad0;
            dst[oy * gw.out + ox] = (ix < 0 || ix >= gw.in) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_2d(const T* col, int C, const AxisGeom& gh, const AxisGeom& gw, T* x) {
  const int M = gh.out * gw.out;
  int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    T* xc = x + static_cast<int64_t>(c) * gh.in * gw.in;
    for (int ky = 0; ky < gh.k; ++ky) {
      for (int kx = 0; kx < gw.k; ++kx, ++row) {
        const T* src = col + row * M;
        for (int oy = 0; oy < gh.out; ++oy) {
          const int iy = oy * gh.stride + ky - gh.pad0;
          if (iy < 0 || iy >= gh.in) continue;
          T* dst = xc + static_cast<int64_t>(iy) * gw.in;
          for (int ox = 0; ox < gw.out; ++ox) {
            const int ix = ox * gw.stride + kx - gw.pad0;
            if (ix >= 0 && ix < gw.in) dst[ix] += src[oy * gw.out + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void im2col_3d(const T* x, int C, const AxisGeom& gd, const AxisGeom& gh,
               const AxisGeom& gw, T* col) {
  const int64_t M = static_cast<int64_t>(gd.out) * gh.out * gw.out;
  const int64_t plane_in = static_cast<int64_t>(gh.in) * gw.in;
  int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<int64_t>(c) * gd.in * plane_in;
    for (int kz = 0; kz < gd.k; ++kz)
      for (int ky = 0; ky < gh.k; ++ky)
        for (int kx = 0; kx < gw.k; ++kx, ++row) {
          T* dst = col + row * M;
          for (int oz = 0; oz < gd.out; ++oz) {
            const int iz = oz * gd.stride + kz - gd.pad0;
            T* dplane = dst + static_cast<int64_t>(oz) * gh.out * gw.out;
            if (iz < 0 || iz >= gd.in) {
              std::fill(dplane, dplane + static_cast<int64_t>(gh.out) * gw.out, T(0));
              continue;
            }
            const T* splane = xc + static_cast<int64_t>(iz) * plane_in;
            for (int oy = 0; oy < gh.out; ++oy) {
              const int iy = oy * gh.stride + ky - gh.pad0;
              T* drow = dplane + static_cast<int64_t>(oy) * gw.out;
              if (iy < 0 || iy >= gh.in) {
                std::fill(drow, drow + gw.out, T(0));
                continue;
              }
              const T* srow = splane + static_cast<int64_t>(iy) * gw.in;
              for (int ox = 0; ox < gw.out; ++ox) {
                const int ix = ox * gw.stride + kx - gw.pad0;
                drow[ox] = (ix < 0 || ix >= gw.in) ? T(0) : srow[ix];
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_3d(const T* col, int C, const AxisGeom& gd, const AxisGeom& gh,
               const AxisGeom& gw, T* x) {
  const int64_t M = static_cast<int64_t>(gd.out) * gh.out * gw.out;
  const int64_t plane_in = static_cast<int64_t>(gh.in) * gw.in;
  int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    T* xc = x + static_cast<int64_t>(c) * gd.in * plane_in;
    for (int kz = 0; kz < gd.k; ++kz)
      for (int ky = 0; ky < gh.k; ++ky)
        for (int kx = 0; kx < gw.k; ++kx, ++row) {
          const T* src = col + row * M;
          for (int oz = 0; oz < gd.out; ++oz) {
            const int iz = oz * gd.stride + kz - gd.pad0;
            if (iz < 0 || iz >= gd.in) continue;
            T* splane = xc + static_cast<int64_t>(iz) * plane_in;
            const T* sp = src + static_cast<int64_t>(oz) * gh.out * gw.out;
            for (int oy = 0; oy < gh.out; ++oy) {
              const int iy = oy * gh.stride + ky - gh.pad0;
              if (iy < 0 || iy >= gh.in) continue;
              T* drow = splane + static_cast<int64_t>(iy) * gw.in;
              const T* srow = sp + static_cast<int64_t>(oy) * gw.out;
              for (int ox = 0; ox < gw.out; ++ox) {
                const int ix = ox * gw.stride + kx - gw.pad0;
                if (ix >= 0 && ix < gw.in) drow[ix] += srow[ox];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// 2-d convolution, "same" padding. x:(N,C,H,W) w:(F,C,kh,kw) b:(F) -> (N,F,Ho,Wo).
template <typename T>
int conv2d(Tape<T>& t, int x_id, int w_id, int b_id, int stride = 1) {
  const Tensor<T>& x = t.value(x_id);
  const Tensor<T>& w = t.value(w_id);
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: rank");
  if (x.dim(1) != w.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(0);
  const AxisGeom gh = same_axis(H, w.dim(2), stride), gw = same_axis(W, w.dim(3), stride);
  const int64_t K = static_cast<int64_t>(C) * w.dim(2) * w.dim(3);
  const int64_t M = static_cast<int64_t>(gh.out) * gw.out;

  Tensor<T> out({N, F, gh.out, gw.out});
  {
    std::vector<T> col(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(w.ptr(), F, K);
    for (int n = 0; n < N; ++n) {
      detail::im2col_2d(x.ptr() + n * C * int64_t(H) * W, C, gh, gw, col.data());
      ConstMatMap<T> cm(col.data(), K, M);
      MatMap<T> om(out.ptr() + n * F * M, F, M);
      om.noalias() = wm * cm;
    }
    const Tensor<T>& b = t.value(b_id);
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f) {
        T* p = out.ptr() + (n * int64_t(F) + f) * M;
        for (int64_t i = 0; i < M; ++i) p[i] += b[f];
      }
  }

  const bool ng = t.needs_grad(x_id) || t.needs_grad(w_id) || t.needs_grad(b_id);
  return t.op(std::move(out), ng, [=](Tape<T>& tp, int self) {
    const Tensor<T>& xv = tp.value(x_id);
    const Tensor<T>& wv = tp.value(w_id);
    const Tensor<T>& g = tp.grad(self);
    std::vector<T> col(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(wv.ptr(), F, K);
    Tensor<T>* dx = tp.needs_grad(x_id) ? &tp.grad(x_id) : nullptr;
    Tensor<T>* dw = tp.needs_grad(w_id) ? &tp.grad(w_id) : nullptr;
    Tensor<T>* db = tp.needs_grad(b_id) ? &tp.grad(b_id) : nullptr;
    std::vector<T> dcol(dx ? static_cast<size_t>(K * M) : 0);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<T> gm(g.ptr() + n * F * M, F, M);
      if (dw) {
        detail::im2col_2d(xv.ptr() + n * C * int64_t(H) * W, C, gh, gw, col.data());
        ConstMatMap<T> cm(col.data(), K, M);
        MatMap<T> dwm(dw->ptr(), F, K);
        dwm.noalias() += gm * cm.transpose();
      }
      if (dx) {
        MatMap<T> dcm(dcol.data(), K, M);
        dcm.noalias() = wm.transpose() * gm;
        detail::col2im_2d(dcol.data(), C, gh, gw, dx->ptr() + n * C * int64_t(H) * W);
      }
      if (db)
        for (int f = 0; f < F; ++f) {
          const T* p = g.ptr() + (n * int64_t(F) + f) * M;
          T s(0);
          for (int64_t i = 0; i < M; ++i) s += p[i];
          (*db)[f] += s;
        }
    }
  });
}

/// Transposed 2-d convolution, stride 2, "same" padding: (N,C,H,W) -> (N,F,2H,2W).
/// w:(C,F,kh,kw). Geometry is the exact adjoint of conv2d(k,stride=2) on the output.
template <typename T>
int conv2d_transpose(Tape<T>& t, int x_id, int w_id, int b_id) {
  const Tensor<T>& x = t.value(x_id);
  const Tensor<T>& w = t.value(w_id);
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("deconv: rank");
  if (x.dim(1) != w.dim(0)) throw std::invalid_argument("deconv: channel mismatch");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(1);
  const int Ho = 2 * H, Wo = 2 * W;
  const AxisGeom gh = same_axis(Ho, w.dim(2), 2), gw = same_axis(Wo, w.dim(3), 2);
  const int64_t K = static_cast<int64_t>(F) * w.dim(2) * w.dim(3);
  const int64_t M = static_cast<int64_t>(H) * W;  // equivalent-conv output cells

  Tensor<T> out({N, F, Ho, Wo});
  {
    std::vector<T> tmp(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(w.ptr(), C, K);
    const Tensor<T>& b = t.value(b_id);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<T> xm(x.ptr() + n * C * M, C, M);
      MatMap<T> tm(tmp.data(), K, M);
      tm.noalias() = wm.transpose() * xm;
      detail::col2im_2d(tmp.data(), F, gh, gw, out.ptr() + n * F * int64_t(Ho) * Wo);
      for (int f = 0; f < F; ++f) {
        T* p = out.ptr() + (n * int64_t(F) + f) * Ho * Wo;
        for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) p[i] += b[f];
      }
    }
  }

  const bool ng = t.needs_grad(x_id) || t.needs_grad(w_id) || t.needs_grad(b_id);
  return t.op(std::move(out), ng, [=](Tape<T>& tp, int self) {
    const Tensor<T>& xv = tp.value(x_id);
    const Tensor<T>& wv = tp.value(w_id);
    const Tensor<T>& g = tp.grad(self);
    std::vector<T> gcol(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(wv.ptr(), C, K);
    Tensor<T>* dx = tp.needs_grad(x_id) ? &tp.grad(x_id) : nullptr;
    Tensor<T>* dw = tp.needs_grad(w_id) ? &tp.grad(w_id) : nullptr;
    Tensor<T>* db = tp.needs_grad(b_id) ? &tp.grad(b_id) : nullptr;
    for (int n = 0; n < N; ++n) {
      detail::im2col_2d(g.ptr() + n * F * int64_t(Ho) * Wo, F, gh, gw, gcol.data());
      ConstMatMap<T> gcm(gcol.data(), K, M);
      if (dx) {
        MatMap<T> dxm(dx->ptr() + n * C * M, C, M);
        dxm.noalias() += wm * gcm;
      }
      if (dw) {
        ConstMatMap<T> xm(xv.ptr() + n * C * M, C, M);
        MatMap<T> dwm(dw->ptr(), C, K);
        dwm.noalias() += xm * gcm.transpose();
      }
      if (db)
        for (int f = 0; f < F; ++f) {
          const T* p = g.ptr() + (n * int64_t(F) + f) * Ho * Wo;
          T s(0);
          for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) s += p[i];
          (*db)[f] += s;
        }
    }
  });
}

/// 3-d convolution, stride 1, "same" padding. x:(N,C,D,H,W) w:(F,C,kd,kh,kw).
template <typename T>
int conv3d(Tape<T>& t, int x_id, int w_id, int b_id) {
  const Tensor<T>& x = t.value(x_id);
  const Tensor<T>& w = t.value(w_id);
  if (x.rank() != 5 || w.rank() != 5) throw std::invalid_argument("conv3d: rank");
  if (x.dim(1) != w.dim(1)) throw std::invalid_argument("conv3d: channel mismatch");
  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int F = w.dim(0);
  const AxisGeom gd = same_axis(D, w.dim(2), 1), gh = same_axis(H, w.dim(3), 1),
                 gw = same_axis(W, w.dim(4), 1);
  const int64_t K = static_cast<int64_t>(C) * w.dim(2) * w.dim(3) * w.dim(4);
  const int64_t M = static_cast<int64_t>(D) * H * W;
  const int64_t S = M;  // stride-1 same keeps spatial size

  Tensor<T> out({N, F, D, H, W});
  {
    std::vector<T> col(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(w.ptr(), F, K);
    const Tensor<T>& b = t.value(b_id);
    for (int n = 0; n < N; ++n) {
      detail::im2col_3d(x.ptr() + n * C * S, C, gd, gh, gw, col.data());
      ConstMatMap<T> cm(col.data(), K, M);
      MatMap<T> om(out.ptr() + n * F * M, F, M);
      om.noalias() = wm * cm;
      for (int f = 0; f < F; ++f) {
        T* p = out.ptr() + (n * int64_t(F) + f) * M;
        for (int64_t i = 0; i < M; ++i) p[i] += b[f];
      }
    }
  }

  const bool ng = t.needs_grad(x_id) || t.needs_grad(w_id) || t.needs_grad(b_id);
  return t.op(std::move(out), ng, [=](Tape<T>& tp, int self) {
    const Tensor<T>& xv = tp.value(x_id);
    const Tensor<T>& wv = tp.value(w_id);
    const Tensor<T>& g = tp.grad(self);
    std::vector<T> col(static_cast<size_t>(K * M));
    ConstMatMap<T> wm(wv.ptr(), F, K);
    Tensor<T>* dx = tp.needs_grad(x_id) ? &tp.grad(x_id) : nullptr;
    Tensor<T>* dw = tp.needs_grad(w_id) ? &tp.grad(w_id) : nullptr;
    Tensor<T>* db = tp.needs_grad(b_id) ? &tp.grad(b_id) : nullptr;
    std::vector<T> dcol(dx ? static_cast<size_t>(K * M) : 0);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<T> gm(g.ptr() + n * F * M, F, M);
      if (dw) {
        detail::im2col_3d(xv.ptr() + n * C * S, C, gd, gh, gw, col.data());
        ConstMatMap<T> cm(col.data(), K, M);
        MatMap<T> dwm(dw->ptr(), F, K);
        dwm.noalias() += gm * cm.transpose();
      }
      if (dx) {
        MatMap<T> dcm(dcol.data(), K, M);
        dcm.noalias() = wm.transpose() * gm;
        detail::col2im_3d(dcol.data(), C, gd, gh, gw, dx->ptr() + n * C * S);
      }
      if (db)
        for (int f = 0; f < F; ++f) {
          const T* p = g.ptr() + (n * int64_t(F) + f) * M;
          T s(0);
          for (int64_t i = 0; i < M; ++i) s += p[i];
          (*db)[f] += s;
        }
    }
  });
}

}  // namespace lungdet::nn
