#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "op_util.hpp"
#include "vitkd/ops.hpp"

namespace vitkd {

using detail::finish;

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = detail::last_dim(x);
  if (x.rank() == 0) throw ShapeError("layer_norm: input must have at least one dimension");
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match feature dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = detail::row_count(x);
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<float>>(rows);
  const float* xd = x.data().data();
  const float* gd = gamma.data().data();
  const float* bd = beta.data().data();
  float* od = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xd + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>(xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      od[r * d + j] = h * gd[j] + bd[j];
    }
  }
  if (autograd::should_record({&x, &gamma, &beta})) {
    auto xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, gi, bi, oi, xhat, rstd, rows, d] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      if (gi->requires_grad) {
        auto& gg = autograd::grad_of(*gi);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
      }
      if (bi->requires_grad) {
        auto& gb = autograd::grad_of(*bi);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
      }
      if (xi->requires_grad) {
        auto& gx = autograd::grad_of(*xi);
        const float* gamma_d = gi->data.data();
        std::vector<float> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[r * d + j] * gamma_d[j];
            m1 += dh[j];
            m2 += static_cast<double>(dh[j]) * (*xhat)[r * d + j];
          }
          const float mean1 = static_cast<float>(m1 / static_cast<double>(d));
          const float mean2 = static_cast<float>(m2 / static_cast<double>(d));
          const float rs = (*rstd)[r];
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += rs * (dh[j] - mean1 - (*xhat)[r * d + j] * mean2);
          }
        }
      }
    });
  }
  finish(out, "layer_norm");
  return out;
}

namespace {

// Softmax over row r of `x`, restricted to entries where allow(j) holds.
template <typename Allow>
void softmax_row(const float* x, float* y, std::size_t n, Allow allow) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (allow(j)) mx = std::max(mx, x[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = allow(j) ? std::exp(x[j] - mx) : 0.0f;
    total += y[j];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

void record_softmax_backward(Tensor& out, const Tensor& x, std::size_t rows, std::size_t n) {
  auto xi = x.impl_ptr(), oi = out.impl_ptr();
  autograd::record(out, [xi, oi, rows, n] {
    if (oi->grad.empty()) return;
    auto& gx = autograd::grad_of(*xi);
    const float* g = oi->grad.data();
    const float* y = oi->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[r * n + j]) * y[r * n + j];
      const float d = static_cast<float>(dot);
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - d);
    }
  });
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax_rows: input must have at least one dimension");
  const std::size_t n = detail::last_dim(x);
  const std::size_t rows = detail::row_count(x);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(x.data().data() + r * n, out.data().data() + r * n, n, [](std::size_t) { return true; });
  }
  if (autograd::should_record({&x})) record_softmax_backward(out, x, rows, n);
  finish(out, "softmax_rows");
  return out;
}

Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> allowed,
                           std::size_t group_repeat) {
  detail::require_rank(x, 3, "masked_softmax_rows");
  const std::size_t groups = x.dim(0), q = x.dim(1), s = x.dim(2);
  if (group_repeat == 0 || groups % group_repeat != 0 || allowed.size() != (groups / group_repeat) * s) {
    throw ShapeError("masked_softmax_rows: key mask of length " + std::to_string(allowed.size()) +
                     " does not fit scores " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    const std::uint8_t* row_mask = allowed.data() + (g / group_repeat) * s;
    if (std::none_of(row_mask, row_mask + s, [](std::uint8_t v) { return v != 0; })) {
      throw DegenerateAttentionError("attention slice " + std::to_string(g) + " has no visible key");
    }
    for (std::size_t r = 0; r < q; ++r) {
      const std::size_t off = (g * q + r) * s;
      softmax_row(x.data().data() + off, out.data().data() + off, s,
                  [row_mask](std::size_t j) { return row_mask[j] != 0; });
    }
  }
  if (autograd::should_record({&x})) record_softmax_backward(out, x, groups * q, s);
  finish(out, "masked_softmax_rows");
  return out;
}

namespace {

// Output element i takes input element src[i]; the backward pass scatters.
Tensor gather_op(const Tensor& x, Shape shape, std::shared_ptr<std::vector<std::size_t>> src,
                 const char* name) {
  Tensor out(std::move(shape));
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[(*src)[i]];
  if (autograd::should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi, src] {
      if (oi->grad.empty()) return;
      auto& gx = autograd::grad_of(*xi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[(*src)[i]] += oi->grad[i];
    });
  }
  finish(out, name);
  return out;
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (autograd::should_record({&x})) {
    auto xi = x.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, oi] {
      if (oi->grad.empty()) return;
      auto& gx = autograd::grad_of(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(-2), n = x.dim(-1);
  const std::size_t outer = x.numel() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  for (std::size_t b = 0; b < outer; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) (*src)[b * m * n + j * m + i] = b * m * n + i * n + j;
    }
  }
  return gather_op(x, std::move(shape), std::move(src), "transpose_last2");
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 3, "split_heads");
  const std::size_t b = x.dim(0), t = x.dim(1), dim = x.dim(2);
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("split_heads: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads));
  }
  const std::size_t hd = dim / heads;
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t i = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t ti = 0; ti < t; ++ti) {
        for (std::size_t di = 0; di < hd; ++di) (*src)[i++] = (bi * t + ti) * dim + h * hd + di;
      }
    }
  }
  return gather_op(x, Shape{b * heads, t, hd}, std::move(src), "split_heads");
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 3, "merge_heads");
  if (heads == 0 || x.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: leading dim " + std::to_string(x.dim(0)) + " not divisible by " +
                     std::to_string(heads));
  }
  const std::size_t b = x.dim(0) / heads, t = x.dim(1), hd = x.dim(2), dim = hd * heads;
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t i = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ti = 0; ti < t; ++ti) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t di = 0; di < hd; ++di) (*src)[i++] = ((bi * heads + h) * t + ti) * hd + di;
      }
    }
  }
  return gather_op(x, Shape{b, t, dim}, std::move(src), "merge_heads");
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
  detail::require_rank(x, 3, "prepend_token");
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (token.numel() != d) {
    throw ShapeError("prepend_token: token " + shape_str(token.shape()) + " does not match " + shape_str(x.shape()));
  }
  Tensor out(Shape{b, n + 1, d});
  auto o = out.data();
  auto xd = x.data(), td = token.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy(td.begin(), td.end(), o.begin() + static_cast<std::ptrdiff_t>(bi * (n + 1) * d));
    std::copy(xd.begin() + static_cast<std::ptrdiff_t>(bi * n * d),
              xd.begin() + static_cast<std::ptrdiff_t>((bi + 1) * n * d),
              o.begin() + static_cast<std::ptrdiff_t>((bi * (n + 1) + 1) * d));
  }
  if (autograd::should_record({&x, &token})) {
    auto xi = x.impl_ptr(), ti = token.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, ti, oi, b, n, d] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (ti->requires_grad) {
        auto& gt = autograd::grad_of(*ti);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t j = 0; j < d; ++j) gt[j] += g[bi * (n + 1) * d + j];
        }
      }
      if (xi->requires_grad) {
        auto& gx = autograd::grad_of(*xi);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t k = 0; k < n * d; ++k) gx[bi * n * d + k] += g[(bi * (n + 1) + 1) * d + k];
        }
      }
    });
  }
  finish(out, "prepend_token");
  return out;
}

Tensor slice_tokens(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_rank(x, 3, "slice_tokens");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (count == 0 || start + count > t) {
    throw ShapeError("slice_tokens: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  }
  auto src = std::make_shared<std::vector<std::size_t>>(b * count * d);
  std::size_t i = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ti = start; ti < start + count; ++ti) {
      for (std::size_t di = 0; di < d; ++di) (*src)[i++] = (bi * t + ti) * d + di;
    }
  }
  return gather_op(x, Shape{b, count, d}, std::move(src), "slice_tokens");
}

Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& token) {
  const std::size_t d = detail::last_dim(x);
  const std::size_t rows = detail::row_count(x);
  if (x.rank() == 0 || token.numel() != d || mask.size() != rows) {
    throw ShapeError("replace_rows: mask of " + std::to_string(mask.size()) + " rows / token " +
                     shape_str(token.shape()) + " do not fit " + shape_str(x.shape()));
  }
  auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  Tensor out(x.shape());
  auto o = out.data();
  auto xd = x.data(), td = token.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = mask[r] ? td[j] : xd[r * d + j];
  }
  if (autograd::should_record({&x, &token})) {
    auto xi = x.impl_ptr(), ti = token.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [xi, ti, oi, keep, rows, d] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        if ((*keep)[r]) {
          if (!ti->requires_grad) continue;
          auto& gt = autograd::grad_of(*ti);
          for (std::size_t j = 0; j < d; ++j) gt[j] += g[r * d + j];
        } else if (xi->requires_grad) {
          auto& gx = autograd::grad_of(*xi);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j];
        }
      }
    });
  }
  finish(out, "replace_rows");
  return out;
}

Tensor select_rows(std::span<const std::uint8_t> mask, const Tensor& if_set, const Tensor& otherwise) {
  detail::require_same_shape(if_set, otherwise, "select_rows");
  const std::size_t d = detail::last_dim(if_set);
  const std::size_t rows = detail::row_count(if_set);
  if (mask.size() != rows) {
    throw ShapeError("select_rows: mask of " + std::to_string(mask.size()) + " rows does not fit " +
                     shape_str(if_set.shape()));
  }
  auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  Tensor out(if_set.shape());
  auto o = out.data();
  auto ad = if_set.data(), bd = otherwise.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = mask[r] ? ad[r * d + j] : bd[r * d + j];
  }
  if (autograd::should_record({&if_set, &otherwise})) {
    auto ai = if_set.impl_ptr(), bi = otherwise.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [ai, bi, oi, keep, rows, d] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        auto& target = (*keep)[r] ? *ai : *bi;
        if (!target.requires_grad) continue;
        auto& gt = autograd::grad_of(target);
        for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[r * d + j];
      }
    });
  }
  finish(out, "select_rows");
  return out;
}

Tensor squared_error(const Tensor& pred, const Tensor& target, std::span<const float> row_weights) {
  detail::require_same_shape(pred, target, "squared_error");
  const std::size_t d = detail::last_dim(pred);
  const std::size_t rows = detail::row_count(pred);
  if (!row_weights.empty() && row_weights.size() != rows) {
    throw ShapeError("squared_error: " + std::to_string(row_weights.size()) + " row weights for " +
                     std::to_string(rows) + " rows");
  }
  auto weights = std::make_shared<std::vector<float>>(row_weights.begin(), row_weights.end());
  auto pd = pred.data(), td = target.data();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float w = weights->empty() ? 1.0f : (*weights)[r];
    if (w == 0.0f) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(pd[r * d + j]) - td[r * d + j];
      row += diff * diff;
    }
    acc += w * row;
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (autograd::should_record({&pred})) {
    auto pi = pred.impl_ptr(), ti = target.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [pi, ti, oi, weights, rows, d] {
      if (oi->grad.empty()) return;
      const float g = oi->grad[0];
      auto& gp = autograd::grad_of(*pi);
      for (std::size_t r = 0; r < rows; ++r) {
        const float w = weights->empty() ? 1.0f : (*weights)[r];
        if (w == 0.0f) continue;
        for (std::size_t j = 0; j < d; ++j) {
          gp[r * d + j] += 2.0f * g * w * (pi->data[r * d + j] - ti->data[r * d + j]);
        }
      }
    });
  }
  finish(out, "squared_error");
  return out;
}

namespace {

void log_softmax_row(const float* z, double* out, std::size_t n, double inv_t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, z[j] * inv_t);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += std::exp(z[j] * inv_t - mx);
  const double lse = mx + std::log(total);
  for (std::size_t j = 0; j < n; ++j) out[j] = z[j] * inv_t - lse;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, float smoothing) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  auto probs = std::make_shared<std::vector<float>>(b * c);
  auto targets = std::make_shared<std::vector<float>>(b * c, smoothing / static_cast<float>(c));
  std::vector<double> logp(c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    (*targets)[i * c + static_cast<std::size_t>(y)] += 1.0f - smoothing;
    log_softmax_row(logits.data().data() + i * c, logp.data(), c, 1.0);
    for (std::size_t j = 0; j < c; ++j) {
      loss -= (*targets)[i * c + j] * logp[j];
      (*probs)[i * c + j] = static_cast<float>(std::exp(logp[j]));
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / static_cast<double>(b)));
  if (autograd::should_record({&logits})) {
    auto li = logits.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [li, oi, probs, targets, b] {
      if (oi->grad.empty()) return;
      const float g = oi->grad[0] / static_cast<float>(b);
      auto& gl = autograd::grad_of(*li);
      for (std::size_t k = 0; k < gl.size(); ++k) gl[k] += g * ((*probs)[k] - (*targets)[k]);
    });
  }
  finish(out, "cross_entropy");
  return out;
}

Tensor kd_kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits, float temperature) {
  detail::require_rank(student_logits, 2, "kd_kl_divergence");
  detail::require_same_shape(student_logits, teacher_logits, "kd_kl_divergence");
  if (!(temperature > 0.0f)) throw ConfigError("kd temperature must be positive");
  const std::size_t b = student_logits.dim(0), c = student_logits.dim(1);
  const double inv_t = 1.0 / temperature;
  auto p_s = std::make_shared<std::vector<float>>(b * c);
  auto p_t = std::make_shared<std::vector<float>>(b * c);
  std::vector<double> ls(c), lt(c);
  double kl = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    log_softmax_row(student_logits.data().data() + i * c, ls.data(), c, inv_t);
    log_softmax_row(teacher_logits.data().data() + i * c, lt.data(), c, inv_t);
    for (std::size_t j = 0; j < c; ++j) {
      const double pt = std::exp(lt[j]);
      kl += pt * (lt[j] - ls[j]);
      (*p_s)[i * c + j] = static_cast<float>(std::exp(ls[j]));
      (*p_t)[i * c + j] = static_cast<float>(pt);
    }
  }
  const double t2 = static_cast<double>(temperature) * temperature;
  Tensor out = Tensor::scalar(static_cast<float>(t2 * kl / static_cast<double>(b)));
  if (autograd::should_record({&student_logits})) {
    auto si = student_logits.impl_ptr(), oi = out.impl_ptr();
    autograd::record(out, [si, oi, p_s, p_t, b, temperature] {
      if (oi->grad.empty()) return;
      // d/dz_s of T²·KL = T·(p_s − p_t)
      const float g = oi->grad[0] * temperature / static_cast<float>(b);
      auto& gs = autograd::grad_of(*si);
      for (std::size_t k = 0; k < gs.size(); ++k) gs[k] += g * ((*p_s)[k] - (*p_t)[k]);
    });
  }
  finish(out, "kd_kl_divergence");
  return out;
}

}  // namespace vitkd
