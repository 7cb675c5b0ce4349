#include <vector>

#include "kernels.hpp"
#include "op_util.hpp"
#include "vitkd/ops.hpp"

namespace vitkd {

using detail::finish;

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                     shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);

  if (autograd::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        kernels::gemm_nt(g, bi->data.data(), autograd::grad_of(*ai).data(), m, n, k, true);
      }
      if (bi->requires_grad) {
        kernels::gemm_tn(ai->data.data(), g, autograd::grad_of(*bi).data(), m, k, n, true);
      }
    });
  }
  finish(out, "matmul");
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(weight, 2, "linear");
  if (x.rank() == 0) throw ShapeError("linear: input must have at least one dimension");
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  if (x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  float* o = out.data().data();
  if (bias.defined()) {
    const float* bv = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_dim; ++j) o[r * out_dim + j] = bv[j];
    }
  }
  kernels::gemm_nn(x.data().data(), weight.data().data(), o, rows, in, out_dim, bias.defined());

  if (autograd::should_record({&x, &weight, &bias})) {
    auto xi = x.impl_ptr(), wi = weight.impl_ptr(), oi = out.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    autograd::record(out, [xi, wi, bi, oi, rows, in, out_dim] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      if (xi->requires_grad) {
        kernels::gemm_nt(g, wi->data.data(), autograd::grad_of(*xi).data(), rows, out_dim, in, true);
      }
      if (wi->requires_grad) {
        kernels::gemm_tn(xi->data.data(), g, autograd::grad_of(*wi).data(), rows, in, out_dim, true);
      }
      if (bi && bi->requires_grad) {
        auto& gb = autograd::grad_of(*bi);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
        }
      }
    });
  }
  finish(out, "linear");
  return out;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  detail::require_rank(a, 3, "batched_matmul");
  detail::require_rank(b, 3, "batched_matmul");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != groups || bk != k) {
    throw ShapeError("batched_matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  Tensor out(Shape{groups, m, n});
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.data().data();
  for (std::size_t g = 0; g < groups; ++g) {
    if (transpose_b) {
      kernels::gemm_nt(ad + g * m * k, bd + g * n * k, od + g * m * n, m, k, n, false);
    } else {
      kernels::gemm_nn(ad + g * m * k, bd + g * k * n, od + g * m * n, m, k, n, false);
    }
  }

  if (autograd::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi, groups, m, k, n, transpose_b] {
      if (oi->grad.empty()) return;
      const float* gd = oi->grad.data();
      const float* ad = ai->data.data();
      const float* bd = bi->data.data();
      float* ga = ai->requires_grad ? autograd::grad_of(*ai).data() : nullptr;
      float* gb = bi->requires_grad ? autograd::grad_of(*bi).data() : nullptr;
      for (std::size_t g = 0; g < groups; ++g) {
        const float* gg = gd + g * m * n;
        const float* ag = ad + g * m * k;
        if (transpose_b) {
          const float* bg = bd + g * n * k;  // [n×k]
          if (ga) kernels::gemm_nn(gg, bg, ga + g * m * k, m, n, k, true);
          if (gb) kernels::gemm_tn(gg, ag, gb + g * n * k, m, n, k, true);
        } else {
          const float* bg = bd + g * k * n;  // [k×n]
          if (ga) kernels::gemm_nt(gg, bg, ga + g * m * k, m, n, k, true);
          if (gb) kernels::gemm_tn(ag, gg, gb + g * k * n, m, k, n, true);
        }
      }
    });
  }
  finish(out, "batched_matmul");
  return out;
}

namespace {

// col[(ci·9 + ky·3 + kx) × (y·w + x)] = x[ci, y + ky − 1, x + kx − 1] (zero outside).
void im2col3x3(const float* x, float* col, std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        float* dst = col + (ci * 9 + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - 1;
            const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
            dst[y * w + xx] = inside ? x[ci * hw + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im3x3(const float* col, float* x, std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const float* src = col + (ci * 9 + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx + kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            x[ci * hw + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] += src[y * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("conv3x3: input must be [c×h×w] or [b×c×h×w], got " + shape_str(x.shape()));
  }
  detail::require_rank(kernel, 4, "conv3x3");
  const bool batched = x.rank() == 4;
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t c_in = x.dim(-3), h = x.dim(-2), w = x.dim(-1);
  const std::size_t c_out = kernel.dim(0);
  if (kernel.dim(1) != c_in || kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw ShapeError("conv3x3: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw ShapeError("conv3x3: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(c_out) + " output channels");
  }
  const std::size_t hw = h * w, ck = c_in * 9;
  Shape shape = batched ? Shape{batch, c_out, h, w} : Shape{c_out, h, w};
  Tensor out(shape);
  auto cols = std::make_shared<std::vector<float>>(batch * ck * hw);
  const float* xd = x.data().data();
  const float* kd = kernel.data().data();
  float* od = out.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    float* col = cols->data() + b * ck * hw;
    im2col3x3(xd + b * c_in * hw, col, c_in, h, w);
    float* ob = od + b * c_out * hw;
    if (bias.defined()) {
      for (std::size_t co = 0; co < c_out; ++co) {
        std::fill(ob + co * hw, ob + (co + 1) * hw, bias.data()[co]);
      }
    }
    kernels::gemm_nn(kd, col, ob, c_out, ck, hw, bias.defined());
  }

  if (autograd::should_record({&x, &kernel, &bias})) {
    auto xi = x.impl_ptr(), ki = kernel.impl_ptr(), oi = out.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    autograd::record(out, [xi, ki, bi, oi, cols, batch, c_in, c_out, h, w, hw, ck] {
      if (oi->grad.empty()) return;
      std::vector<float> dcol;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* g = oi->grad.data() + b * c_out * hw;
        const float* col = cols->data() + b * ck * hw;
        if (ki->requires_grad) {
          kernels::gemm_nt(g, col, autograd::grad_of(*ki).data(), c_out, hw, ck, true);
        }
        if (bi && bi->requires_grad) {
          auto& gb = autograd::grad_of(*bi);
          for (std::size_t co = 0; co < c_out; ++co) {
            for (std::size_t p = 0; p < hw; ++p) gb[co] += g[co * hw + p];
          }
        }
        if (xi->requires_grad) {
          dcol.assign(ck * hw, 0.0f);
          kernels::gemm_tn(ki->data.data(), g, dcol.data(), c_out, ck, hw, false);
          col2im3x3(dcol.data(), autograd::grad_of(*xi).data() + b * c_in * hw, c_in, h, w);
        }
      }
    });
  }
  finish(out, "conv3x3");
  return out;
}

}  // namespace vitkd
