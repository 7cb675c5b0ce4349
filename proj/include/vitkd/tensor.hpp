#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vitkd/error.hpp"

namespace vitkd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

// Handle to a dense row-major f32 array. Copies share storage, like a
// torch::Tensor; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float value) { return Tensor(Shape{}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<float> data() { return impl().data; }
  std::span<const float> data() const { return impl().data; }
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return defined() && impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return defined() && !impl().grad.empty(); }
  // Zero-length span when no gradient has been accumulated.
  std::span<const float> grad() const { return impl().grad; }
  std::span<float> mutable_grad();
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Recorded operations of one computation graph. Each thread owns its own
// tape, so independent graphs on different threads never interact.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  static Tape& current();

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  // Seeds d(loss)/d(loss) = 1, replays entries in reverse recording order,
  // then clears the tape.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<BackwardFn> entries_;
};

bool grad_enabled();

// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// Building blocks for custom ops.
namespace autograd {

bool should_record(std::initializer_list<const Tensor*> inputs);
// Marks `output` as differentiable and records `fn` on the current tape.
void record(Tensor& output, Tape::BackwardFn fn);
// Lazily allocated zero-filled gradient buffer.
std::vector<float>& grad_of(TensorImpl& impl);

}  // namespace autograd

// Throws NumericError when `t` holds NaN or Inf. Called after every op when
// VITKD_CHECK_FINITE is defined (debug builds).
void check_finite(const Tensor& t, const char* op);

}  // namespace vitkd
