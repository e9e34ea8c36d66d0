#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "waveglow/tensor.hpp"

namespace waveglow {

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;
template <typename T>
using MapA = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapA = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MapV = Eigen::Map<EVec<T>>;
template <typename T>
using CMapV = Eigen::Map<const EVec<T>>;

template <typename T, typename A>
MapA<T> arr(std::vector<T, A>& v) {
  return MapA<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}
template <typename T, typename A>
CMapA<T> arr(const std::vector<T, A>& v) {
  return CMapA<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Builds the output node and, when recording, wires parents + backward rule.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<Tensor<T>> inputs,
                  std::function<void(TensorNode<T>&)> bwd) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    out.node()->requires_grad = true;
    for (const auto& t : inputs) out.node()->parents.push_back(t.node());
    out.node()->backward_fn = std::move(bwd);
  }
  return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()) + " (no implicit broadcasting)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += detail::arr(self.grad);
    if (self.parents[1]->requires_grad)
      detail::arr(self.parents[1]->grad) += detail::arr(self.grad);
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value) + detail::arr(b.node()->value);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += detail::arr(self.grad);
    if (self.parents[1]->requires_grad)
      detail::arr(self.parents[1]->grad) -= detail::arr(self.grad);
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value) - detail::arr(b.node()->value);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_op<T>(a.shape(), {a, b}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) +=
          detail::arr(self.grad) * detail::arr(self.parents[1]->value);
    if (self.parents[1]->requires_grad)
      detail::arr(self.parents[1]->grad) +=
          detail::arr(self.grad) * detail::arr(self.parents[0]->value);
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value) * detail::arr(b.node()->value);
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = detail::make_op<T>(a.shape(), {a}, [c](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += c * detail::arr(self.grad);
  });
  detail::arr(out.node()->value) = c * detail::arr(a.node()->value);
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = detail::make_op<T>(a.shape(), {a}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += detail::arr(self.grad) * detail::arr(self.value);
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value).exp();
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v > T(0)))
      throw NumericError("log: domain error, input value " + std::to_string(v) +
                         " is not positive");
  auto out = detail::make_op<T>(a.shape(), {a}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) +=
          detail::arr(self.grad) / detail::arr(self.parents[0]->value);
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value).log();
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  auto out = detail::make_op<T>(a.shape(), {a}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) +=
          detail::arr(self.grad) * (T(1) - detail::arr(self.value).square());
  });
  detail::arr(out.node()->value) = detail::arr(a.node()->value).tanh();
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = detail::make_op<T>(a.shape(), {a}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += detail::arr(self.grad) *
                                            detail::arr(self.value) *
                                            (T(1) - detail::arr(self.value));
  });
  detail::arr(out.node()->value) =
      T(1) / (T(1) + (-detail::arr(a.node()->value)).exp());
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = detail::make_op<T>(Shape{}, {a}, [](TensorNode<T>& self) {
    if (self.parents[0]->requires_grad)
      detail::arr(self.parents[0]->grad) += self.grad[0];
  });
  out.node()->value[0] = detail::arr(a.node()->value).sum();
  return out;
}

// ---------------------------------------------------------------------------
// Matrix / layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_op<T>(Shape{m, n}, {a, b}, [m, k, n](TensorNode<T>& self) {
    detail::CMapM<T> gy(self.grad.data(), m, n);
    detail::CMapM<T> av(self.parents[0]->value.data(), m, k);
    detail::CMapM<T> bv(self.parents[1]->value.data(), k, n);
    if (self.parents[0]->requires_grad) {
      detail::MapM<T> ga(self.parents[0]->grad.data(), m, k);
      ga.noalias() += gy * bv.transpose();
    }
    if (self.parents[1]->requires_grad) {
      detail::MapM<T> gb(self.parents[1]->grad.data(), k, n);
      gb.noalias() += av.transpose() * gy;
    }
  });
  detail::MapM<T> y(out.node()->value.data(), m, n);
  detail::CMapM<T> av(a.node()->value.data(), m, k);
  detail::CMapM<T> bv(b.node()->value.data(), k, n);
  y.noalias() = av * bv;
  return out;
}

template <typename T>
Tensor<T> narrow_channels(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  if (x.ndim() != 3 || start < 0 || len < 1 || start + len > x.dim(1))
    throw ShapeError("narrow_channels: slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for " +
                     shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), Tn = x.dim(2);
  auto out = detail::make_op<T>(Shape{B, len, Tn}, {x},
                                [B, C, Tn, start, len](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    for (std::int64_t b = 0; b < B; ++b) {
      const T* g = self.grad.data() + b * len * Tn;
      T* dst = self.parents[0]->grad.data() + (b * C + start) * Tn;
      detail::MapA<T>(dst, len * Tn) += detail::CMapA<T>(g, len * Tn);
    }
  });
  for (std::int64_t b = 0; b < B; ++b)
    std::memcpy(out.node()->value.data() + b * len * Tn,
                x.node()->value.data() + (b * C + start) * Tn,
                static_cast<size_t>(len * Tn) * sizeof(T));
  return out;
}

// Splits [B,C,T] at channel index `first` into ([B,first,T], [B,C-first,T]).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::int64_t first) {
  return {narrow_channels(x, 0, first), narrow_channels(x, first, x.dim(1) - first)};
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto B = parts[0].dim(0), Tn = parts[0].dim(2);
  std::int64_t C = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 3 || p.dim(0) != B || p.dim(2) != Tn)
      throw ShapeError("concat_channels: incompatible part " + shape_str(p.shape()));
    C += p.dim(1);
  }
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  auto out = detail::make_op<T>(Shape{B, C, Tn}, parts,
                                [B, C, Tn, widths](TensorNode<T>& self) {
    std::int64_t off = 0;
    for (size_t i = 0; i < widths.size(); ++i) {
      auto& p = self.parents[i];
      if (p->requires_grad) {
        for (std::int64_t b = 0; b < B; ++b)
          detail::MapA<T>(p->grad.data() + b * widths[i] * Tn, widths[i] * Tn) +=
              detail::CMapA<T>(self.grad.data() + (b * C + off) * Tn, widths[i] * Tn);
      }
      off += widths[i];
    }
  });
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    for (std::int64_t b = 0; b < B; ++b)
      std::memcpy(out.node()->value.data() + (b * C + off) * Tn,
                  p.node()->value.data() + b * w * Tn,
                  static_cast<size_t>(w * Tn) * sizeof(T));
    off += w;
  }
  return out;
}

template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  const auto C = parts[0].dim(1), Tn = parts[0].dim(2);
  std::int64_t B = 0;
  std::vector<std::int64_t> counts;
  for (const auto& p : parts) {
    if (p.ndim() != 3 || p.dim(1) != C || p.dim(2) != Tn)
      throw ShapeError("concat_batch: incompatible part " + shape_str(p.shape()));
    B += p.dim(0);
    counts.push_back(p.dim(0) * C * Tn);
  }
  auto out = detail::make_op<T>(Shape{B, C, Tn}, parts, [counts](TensorNode<T>& self) {
    std::int64_t off = 0;
    for (size_t i = 0; i < counts.size(); ++i) {
      auto& p = self.parents[i];
      if (p->requires_grad)
        detail::MapA<T>(p->grad.data(), counts[i]) +=
            detail::CMapA<T>(self.grad.data() + off, counts[i]);
      off += counts[i];
    }
  });
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.node()->value.data() + off, p.node()->value.data(),
                static_cast<size_t>(p.numel()) * sizeof(T));
    off += p.numel();
  }
  return out;
}

template <typename T>
Tensor<T> trim_time(const Tensor<T>& x, std::int64_t new_len) {
  if (x.ndim() != 3 || new_len < 1 || new_len > x.dim(2))
    throw ShapeError("trim_time: cannot trim " + shape_str(x.shape()) + " to length " +
                     std::to_string(new_len));
  const auto B = x.dim(0), C = x.dim(1), Tn = x.dim(2);
  auto out = detail::make_op<T>(Shape{B, C, new_len}, {x},
                                [B, C, Tn, new_len](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    for (std::int64_t r = 0; r < B * C; ++r)
      detail::MapA<T>(self.parents[0]->grad.data() + r * Tn, new_len) +=
          detail::CMapA<T>(self.grad.data() + r * new_len, new_len);
  });
  for (std::int64_t r = 0; r < B * C; ++r)
    std::memcpy(out.node()->value.data() + r * new_len, x.node()->value.data() + r * Tn,
                static_cast<size_t>(new_len) * sizeof(T));
  return out;
}

// ---------------------------------------------------------------------------
// Squeeze / group reshapes
// ---------------------------------------------------------------------------

// [B,T] -> [B,group,T/group] with element (b,c,t) = audio(b, t*group + c).
template <typename T>
Tensor<T> squeeze_groups(const Tensor<T>& audio, std::int64_t group) {
  if (audio.ndim() != 2)
    throw ShapeError("squeeze_groups: expected [B,T], got " + shape_str(audio.shape()));
  const auto B = audio.dim(0), Tn = audio.dim(1);
  if (group < 1 || Tn % group != 0)
    throw ShapeError("squeeze_groups: length " + std::to_string(Tn) +
                     " not divisible by group " + std::to_string(group));
  const auto Tg = Tn / group;
  auto out = detail::make_op<T>(Shape{B, group, Tg}, {audio},
                                [B, group, Tg](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < group; ++c)
        for (std::int64_t t = 0; t < Tg; ++t)
          self.parents[0]->grad[(b * Tg + t) * group + c] +=
              self.grad[(b * group + c) * Tg + t];
  });
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < group; ++c)
      for (std::int64_t t = 0; t < Tg; ++t)
        out.node()->value[(b * group + c) * Tg + t] =
            audio.node()->value[(b * Tg + t) * group + c];
  return out;
}

// Inverse of squeeze_groups: [B,C,Tg] -> [B, C*Tg].
template <typename T>
Tensor<T> unsqueeze_groups(const Tensor<T>& x) {
  if (x.ndim() != 3)
    throw ShapeError("unsqueeze_groups: expected [B,C,Tg], got " + shape_str(x.shape()));
  const auto B = x.dim(0), C = x.dim(1), Tg = x.dim(2);
  auto out = detail::make_op<T>(Shape{B, C * Tg}, {x}, [B, C, Tg](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t t = 0; t < Tg; ++t)
          self.parents[0]->grad[(b * C + c) * Tg + t] +=
              self.grad[(b * Tg + t) * C + c];
  });
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < Tg; ++t)
        out.node()->value[(b * Tg + t) * C + c] = x.node()->value[(b * C + c) * Tg + t];
  return out;
}

// [B,C,Tg*group] -> [B,C*group,Tg]; out(b, c*group+j, t) = in(b, c, t*group+j).
// Aligns a sample-rate conditioning signal with squeezed audio.
template <typename T>
Tensor<T> fold_groups(const Tensor<T>& x, std::int64_t group) {
  if (x.ndim() != 3 || group < 1 || x.dim(2) % group != 0)
    throw ShapeError("fold_groups: cannot fold " + shape_str(x.shape()) + " by group " +
                     std::to_string(group));
  const auto B = x.dim(0), C = x.dim(1), Tm = x.dim(2), Tg = Tm / group;
  auto out = detail::make_op<T>(Shape{B, C * group, Tg}, {x},
                                [B, C, Tm, Tg, group](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t j = 0; j < group; ++j)
          for (std::int64_t t = 0; t < Tg; ++t)
            self.parents[0]->grad[(b * C + c) * Tm + t * group + j] +=
                self.grad[(b * C * group + c * group + j) * Tg + t];
  });
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t j = 0; j < group; ++j)
        for (std::int64_t t = 0; t < Tg; ++t)
          out.node()->value[(b * C * group + c * group + j) * Tg + t] =
              x.node()->value[(b * C + c) * Tm + t * group + j];
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

// col(ci*K + k, t) = x_pad(b, ci, t + k*dilation - padding)
template <typename T>
void im2col(const T* x, std::int64_t Cin, std::int64_t Tin, std::int64_t K,
            std::int64_t dilation, std::int64_t padding, std::int64_t Tout,
            AlignedVec<T>& col) {
  col.assign(static_cast<size_t>(Cin * K * Tout), T(0));
  for (std::int64_t ci = 0; ci < Cin; ++ci) {
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t off = k * dilation - padding;
      const std::int64_t t0 = std::max<std::int64_t>(0, -off);
      const std::int64_t t1 = std::min<std::int64_t>(Tout, Tin - off);
      if (t1 > t0)
        std::memcpy(col.data() + (ci * K + k) * Tout + t0, x + ci * Tin + t0 + off,
                    static_cast<size_t>(t1 - t0) * sizeof(T));
    }
  }
}

template <typename T>
void col2im_add(const AlignedVec<T>& col, std::int64_t Cin, std::int64_t Tin,
                std::int64_t K, std::int64_t dilation, std::int64_t padding,
                std::int64_t Tout, T* gx) {
  for (std::int64_t ci = 0; ci < Cin; ++ci) {
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t off = k * dilation - padding;
      const std::int64_t t0 = std::max<std::int64_t>(0, -off);
      const std::int64_t t1 = std::min<std::int64_t>(Tout, Tin - off);
      if (t1 > t0)
        MapA<T>(gx + ci * Tin + t0 + off, t1 - t0) +=
            CMapA<T>(col.data() + (ci * K + k) * Tout + t0, t1 - t0);
    }
  }
}

}  // namespace detail

// Cross-correlation over [B,Cin,T] with weight [Cout,Cin,K] and per-channel
// bias [Cout]; T' = T + 2*padding - dilation*(K-1). Lowered onto a GEMM via
// im2col; the column buffer is rebuilt in backward rather than retained.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t dilation, std::int64_t padding) {
  if (x.ndim() != 3 || w.ndim() != 3 || bias.ndim() != 1)
    throw ShapeError("conv1d: expected x[B,Cin,T], w[Cout,Cin,K], bias[Cout]; got " +
                     shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(bias.shape()));
  const auto B = x.dim(0), Cin = x.dim(1), Tin = x.dim(2);
  const auto Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv1d: weight expects " + std::to_string(w.dim(1)) +
                     " input channels, input has " + std::to_string(Cin));
  if (bias.dim(0) != Cout)
    throw ShapeError("conv1d: bias length " + std::to_string(bias.dim(0)) +
                     " != output channels " + std::to_string(Cout));
  if (K < 1 || dilation < 1 || padding < 0)
    throw ShapeError("conv1d: K, dilation must be >= 1 and padding >= 0");
  const auto Tout = Tin + 2 * padding - dilation * (K - 1);
  if (Tout < 1)
    throw ShapeError("conv1d: input length " + std::to_string(Tin) + " too short for K=" +
                     std::to_string(K) + " dilation=" + std::to_string(dilation) +
                     " padding=" + std::to_string(padding));

  auto out = detail::make_op<T>(
      Shape{B, Cout, Tout}, {x, w, bias},
      [B, Cin, Tin, Cout, K, Tout, dilation, padding](TensorNode<T>& self) {
        auto& xp = self.parents[0];
        auto& wp = self.parents[1];
        auto& bp = self.parents[2];
        detail::CMapM<T> wm(wp->value.data(), Cout, Cin * K);
        AlignedVec<T> col, gcol;
        for (std::int64_t b = 0; b < B; ++b) {
          detail::CMapM<T> gy(self.grad.data() + b * Cout * Tout, Cout, Tout);
          if (wp->requires_grad) {
            detail::im2col(xp->value.data() + b * Cin * Tin, Cin, Tin, K, dilation,
                           padding, Tout, col);
            detail::MapM<T> gw(wp->grad.data(), Cout, Cin * K);
            gw.noalias() += gy * detail::CMapM<T>(col.data(), Cin * K, Tout).transpose();
          }
          if (bp->requires_grad) {
            detail::MapV<T> gb(bp->grad.data(), Cout);
            gb.noalias() += gy.rowwise().sum();
          }
          if (xp->requires_grad) {
            gcol.resize(static_cast<size_t>(Cin * K * Tout));
            detail::MapM<T> gc(gcol.data(), Cin * K, Tout);
            gc.noalias() = wm.transpose() * gy;
            detail::col2im_add(gcol, Cin, Tin, K, dilation, padding, Tout,
                               xp->grad.data() + b * Cin * Tin);
          }
        }
      });

  detail::CMapM<T> wm(w.node()->value.data(), Cout, Cin * K);
  detail::CMapV<T> bv(bias.node()->value.data(), Cout);
  AlignedVec<T> col;
  for (std::int64_t b = 0; b < B; ++b) {
    detail::im2col(x.node()->value.data() + b * Cin * Tin, Cin, Tin, K, dilation,
                   padding, Tout, col);
    detail::MapM<T> y(out.node()->value.data() + b * Cout * Tout, Cout, Tout);
    y.noalias() = wm * detail::CMapM<T>(col.data(), Cin * K, Tout);
    y.colwise() += bv;
  }
  return out;
}

// Transposed 1-d convolution: x[B,Cin,Tin], w[Cin,Cout,K], stride s;
// out[b,co,t*s+k] += sum_ci x[b,ci,t] * w[ci,co,k], length (Tin-1)*s + K.
template <typename T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias, std::int64_t stride) {
  if (x.ndim() != 3 || w.ndim() != 3 || bias.ndim() != 1)
    throw ShapeError("conv_transpose1d: expected x[B,Cin,T], w[Cin,Cout,K], bias[Cout]");
  const auto B = x.dim(0), Cin = x.dim(1), Tin = x.dim(2);
  const auto Cout = w.dim(1), K = w.dim(2);
  if (w.dim(0) != Cin)
    throw ShapeError("conv_transpose1d: weight expects " + std::to_string(w.dim(0)) +
                     " input channels, input has " + std::to_string(Cin));
  if (bias.dim(0) != Cout || stride < 1)
    throw ShapeError("conv_transpose1d: bad bias length or stride");
  const auto Tout = (Tin - 1) * stride + K;

  auto out = detail::make_op<T>(
      Shape{B, Cout, Tout}, {x, w, bias},
      [B, Cin, Tin, Cout, K, Tout, stride](TensorNode<T>& self) {
        auto& xp = self.parents[0];
        auto& wp = self.parents[1];
        auto& bp = self.parents[2];
        detail::CMapM<T> wm(wp->value.data(), Cin, Cout * K);
        AlignedVec<T> gys(static_cast<size_t>(Cout * K));
        for (std::int64_t b = 0; b < B; ++b) {
          const T* gy = self.grad.data() + b * Cout * Tout;
          if (bp->requires_grad) {
            detail::MapV<T> gb(bp->grad.data(), Cout);
            gb.noalias() +=
                detail::CMapM<T>(gy, Cout, Tout).rowwise().sum();
          }
          if (!xp->requires_grad && !wp->requires_grad) continue;
          for (std::int64_t t = 0; t < Tin; ++t) {
            for (std::int64_t co = 0; co < Cout; ++co)
              std::memcpy(gys.data() + co * K, gy + co * Tout + t * stride,
                          static_cast<size_t>(K) * sizeof(T));
            detail::CMapV<T> gv(gys.data(), Cout * K);
            if (xp->requires_grad) {
              Eigen::Map<detail::EVec<T>, 0, Eigen::InnerStride<>> gxcol(
                  xp->grad.data() + b * Cin * Tin + t, Cin, Eigen::InnerStride<>(Tin));
              gxcol.noalias() += wm * gv;
            }
            if (wp->requires_grad) {
              Eigen::Map<const detail::EVec<T>, 0, Eigen::InnerStride<>> xcol(
                  xp->value.data() + b * Cin * Tin + t, Cin, Eigen::InnerStride<>(Tin));
              detail::MapM<T> gw(wp->grad.data(), Cin, Cout * K);
              gw.noalias() += xcol * gv.transpose();
            }
          }
        }
      });

  detail::CMapM<T> wm(w.node()->value.data(), Cin, Cout * K);
  AlignedVec<T> tmp(static_cast<size_t>(Cout * K));
  for (std::int64_t b = 0; b < B; ++b) {
    T* y = out.node()->value.data() + b * Cout * Tout;
    for (std::int64_t co = 0; co < Cout; ++co)
      detail::MapA<T>(y + co * Tout, Tout).setConstant(bias.at(co));
    for (std::int64_t t = 0; t < Tin; ++t) {
      Eigen::Map<const detail::EVec<T>, 0, Eigen::InnerStride<>> xcol(
          x.node()->value.data() + b * Cin * Tin + t, Cin, Eigen::InnerStride<>(Tin));
      detail::MapV<T> tv(tmp.data(), Cout * K);
      tv.noalias() = wm.transpose() * xcol;
      for (std::int64_t co = 0; co < Cout; ++co)
        detail::MapA<T>(y + co * Tout + t * stride, K) +=
            detail::CMapA<T>(tmp.data() + co * K, K);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel mixing (1x1 invertible convolution core) and its log-determinant
// ---------------------------------------------------------------------------

// y(b,:,t) = W * x(b,:,t) for a square W [C,C].
template <typename T>
Tensor<T> channel_mix(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.ndim() != 3 || w.ndim() != 2 || w.dim(0) != w.dim(1) || w.dim(0) != x.dim(1))
    throw ShapeError("channel_mix: need x[B,C,T] and square w[C,C]; got " +
                     shape_str(x.shape()) + ", " + shape_str(w.shape()));
  const auto B = x.dim(0), C = x.dim(1), Tn = x.dim(2);
  auto out = detail::make_op<T>(Shape{B, C, Tn}, {x, w}, [B, C, Tn](TensorNode<T>& self) {
    auto& xp = self.parents[0];
    auto& wp = self.parents[1];
    detail::CMapM<T> wm(wp->value.data(), C, C);
    for (std::int64_t b = 0; b < B; ++b) {
      detail::CMapM<T> gy(self.grad.data() + b * C * Tn, C, Tn);
      if (xp->requires_grad) {
        detail::MapM<T> gx(xp->grad.data() + b * C * Tn, C, Tn);
        gx.noalias() += wm.transpose() * gy;
      }
      if (wp->requires_grad) {
        detail::CMapM<T> xv(xp->value.data() + b * C * Tn, C, Tn);
        detail::MapM<T> gw(wp->grad.data(), C, C);
        gw.noalias() += gy * xv.transpose();
      }
    }
  });
  detail::CMapM<T> wm(w.node()->value.data(), C, C);
  for (std::int64_t b = 0; b < B; ++b) {
    detail::MapM<T> y(out.node()->value.data() + b * C * Tn, C, Tn);
    detail::CMapM<T> xv(x.node()->value.data() + b * C * Tn, C, Tn);
    y.noalias() = wm * xv;
  }
  return out;
}

inline constexpr double kSingularDetFloor = 1e-12;

// log|det W| via LU with partial pivoting; gradient is W^{-T}.
template <typename T>
Tensor<T> logabsdet(const Tensor<T>& w) {
  if (w.ndim() != 2 || w.dim(0) != w.dim(1))
    throw ShapeError("logabsdet: need square matrix, got " + shape_str(w.shape()));
  const auto C = w.dim(0);
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> m(C, C);
  detail::CMapM<T> wm(w.node()->value.data(), C, C);
  m = wm;
  Eigen::PartialPivLU<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> lu(m);
  T lad = T(0);
  for (std::int64_t i = 0; i < C; ++i) lad += std::log(std::abs(lu.matrixLU()(i, i)));
  if (!(lad > static_cast<T>(std::log(kSingularDetFloor))))
    throw NumericError("logabsdet: matrix is singular, |det| <= 1e-12 (log|det| = " +
                       std::to_string(static_cast<double>(lad)) + ")");
  auto out = detail::make_op<T>(Shape{}, {w}, [C](TensorNode<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> m(C, C);
    m = detail::CMapM<T>(self.parents[0]->value.data(), C, C);
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> inv =
        Eigen::PartialPivLU<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>(m)
            .inverse();
    detail::MapM<T> gw(self.parents[0]->grad.data(), C, C);
    gw.noalias() += self.grad[0] * inv.transpose();
  });
  out.node()->value[0] = lad;
  return out;
}

// ---------------------------------------------------------------------------
// Weight normalization: w[co,..] = g[co] * v[co,..] / ||v[co,..]||
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> weight_norm(const Tensor<T>& v, const Tensor<T>& g) {
  if (v.ndim() < 1 || g.ndim() != 1 || g.dim(0) != v.dim(0))
    throw ShapeError("weight_norm: direction " + shape_str(v.shape()) +
                     " and magnitude " + shape_str(g.shape()) + " are incompatible");
  const auto R = v.dim(0);
  const auto M = v.numel() / R;
  std::vector<T> norms(static_cast<size_t>(R));
  for (std::int64_t r = 0; r < R; ++r) {
    T n = detail::CMapV<T>(v.node()->value.data() + r * M, M).norm();
    if (!(n > T(1e-12)))
      throw NumericError("weight_norm: degenerate direction, ||v|| = " +
                         std::to_string(static_cast<double>(n)) + " in row " +
                         std::to_string(r));
    norms[static_cast<size_t>(r)] = n;
  }
  auto out = detail::make_op<T>(v.shape(), {v, g}, [R, M](TensorNode<T>& self) {
    auto& vp = self.parents[0];
    auto& gp = self.parents[1];
    for (std::int64_t r = 0; r < R; ++r) {
      detail::CMapV<T> vr(vp->value.data() + r * M, M);
      detail::CMapV<T> gw(self.grad.data() + r * M, M);
      const T n = vr.norm();
      const T gain = gp->value[static_cast<size_t>(r)];
      const T dot = gw.dot(vr);
      if (vp->requires_grad) {
        detail::MapV<T> gv(vp->grad.data() + r * M, M);
        gv.noalias() += (gain / n) * gw - (gain * dot / (n * n * n)) * vr;
      }
      if (gp->requires_grad) gp->grad[static_cast<size_t>(r)] += dot / n;
    }
  });
  for (std::int64_t r = 0; r < R; ++r) {
    detail::CMapV<T> vr(v.node()->value.data() + r * M, M);
    detail::MapV<T> wr(out.node()->value.data() + r * M, M);
    wr.noalias() = (g.at(r) / norms[static_cast<size_t>(r)]) * vr;
  }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace waveglow
