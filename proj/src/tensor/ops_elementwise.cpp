#include <cmath>
#include <memory>

#include "op_util.hpp"
#include "vitkd/ops.hpp"

namespace vitkd {

using detail::finish;

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
  if (autograd::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = autograd::grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = autograd::grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  finish(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] - bd[i];
  if (autograd::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = autograd::grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = autograd::grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  finish(out, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
  if (autograd::should_record({&a, &b})) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = autograd::grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = autograd::grad_of(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  finish(out, "mul");
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  if (autograd::should_record({&a})) {
    auto ai = a.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, oi, factor] {
      if (oi->grad.empty()) return;
      auto& ga = autograd::grad_of(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * factor;
    });
  }
  finish(out, "scale");
  return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  bool suffix = ys.size() <= xs.size();
  for (std::size_t i = 0; suffix && i < ys.size(); ++i) {
    suffix = ys[ys.size() - 1 - i] == xs[xs.size() - 1 - i];
  }
  if (!suffix) {
    throw ShapeError("add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  Tensor out(xs);
  auto o = out.data();
  auto xd = x.data(), yd = y.data();
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t j = 0; j < inner; ++j) o[r * inner + j] = xd[r * inner + j] + yd[j];
  }
  if (autograd::should_record({&x, &y})) {
    auto xi = x.impl_ptr(), yi = y.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, yi, oi, outer, inner] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        auto& gx = autograd::grad_of(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (yi->requires_grad) {
        auto& gy = autograd::grad_of(*yi);
        for (std::size_t r = 0; r < outer; ++r) {
          for (std::size_t j = 0; j < inner; ++j) gy[j] += g[r * inner + j];
        }
      }
    });
  }
  finish(out, "add_broadcast");
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  if (autograd::should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi] {
      if (oi->grad.empty()) return;
      auto& gx = autograd::grad_of(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xi->data[i] > 0.0f) gx[i] += oi->grad[i];
      }
    });
  }
  finish(out, "relu");
  return out;
}

namespace {

constexpr float kSqrt2OverPi = 0.7978845608028654f;
constexpr float kGeluCubic = 0.044715f;

}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xd = x.data();
  const bool record = autograd::should_record({&x});
  auto tanh_cache = std::make_shared<std::vector<float>>(record ? o.size() : 0);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const float v = xd[i];
    const float t = std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v));
    o[i] = 0.5f * v * (1.0f + t);
    if (record) (*tanh_cache)[i] = t;
  }
  if (record) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi, tanh_cache] {
      if (oi->grad.empty()) return;
      auto& gx = autograd::grad_of(*xi);
      const auto& tc = *tanh_cache;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const float v = xi->data[i];
        const float t = tc[i];
        const float dt = (1.0f - t * t) * kSqrt2OverPi * (1.0f + 3.0f * kGeluCubic * v * v);
        gx[i] += oi->grad[i] * (0.5f * (1.0f + t) + 0.5f * v * dt);
      }
    });
  }
  finish(out, "gelu");
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (autograd::should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi] {
      if (oi->grad.empty()) return;
      const float g = oi->grad[0];
      auto& gx = autograd::grad_of(*xi);
      for (auto& v : gx) v += g;
    });
  }
  finish(out, "sum");
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

}  // namespace vitkd
