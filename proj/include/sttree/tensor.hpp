#pragma once

// Dense row-major tensor of 64-bit floats with reverse-mode autodiff on a
// dynamically recorded tape. Gradients live next to the values they belong
// to; views (reshape) share both.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sttree/errors.hpp"

namespace sttree {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Value/gradient buffer shared by a tensor and all of its views.
struct TensorStorage {
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;  // undefined handle

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : st_(std::make_shared<TensorStorage>()), shape_(std::move(shape)) {
    validate_shape();
    st_->data.assign(shape_numel(shape_), fill);
    st_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : st_(std::make_shared<TensorStorage>()), shape_(std::move(shape)) {
    validate_shape();
    if (values.size() != shape_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape_));
    st_->data = std::move(values);
    st_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return st_ ? st_->data.size() : 0; }

  double* data() { return st_->data.data(); }
  const double* data() const { return st_->data.data(); }
  std::vector<double>& values() { return st_->data; }
  const std::vector<double>& values() const { return st_->data; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape_));
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    st_->requires_grad = b;
    if (b) st_->ensure_grad();
    return *this;
  }

  double* grad() {
    st_->ensure_grad();
    return st_->grad.data();
  }
  const std::vector<double>& grad_vec() const {
    st_->ensure_grad();
    return st_->grad;
  }
  void zero_grad() {
    if (st_) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
  }

  // View over the same storage; values and gradients stay shared bit for bit.
  Tensor reshape(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
    Tensor t;
    t.st_ = st_;
    t.shape_ = std::move(s);
    return t;
  }

  const std::shared_ptr<TensorStorage>& storage() const { return st_; }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: rank-0 shapes are not supported");
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_str(shape_));
  }

  std::shared_ptr<TensorStorage> st_;
  Shape shape_;
};

// Records one backward closure per primitive. A Tape is active for its
// lifetime; ops record onto the innermost active tape. backward() zeroes the
// gradients of recorded intermediates (so repeated calls are well defined)
// but leaves leaf gradients untouched: leaves accumulate until zero_grad().
class Tape {
 public:
  Tape() : prev_(current()) { current() = this; }
  ~Tape() { current() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current(); }

  void record(std::shared_ptr<TensorStorage> out, std::function<void()> backward) {
    out->ensure_grad();
    outputs_.push_back(std::move(out));
    nodes_.push_back(std::move(backward));
  }

  std::size_t node_count() const { return nodes_.size(); }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward: loss must be a defined scalar, got " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    for (auto& s : outputs_) {
      s->ensure_grad();
      std::fill(s->grad.begin(), s->grad.end(), 0.0);
    }
    loss.storage()->ensure_grad();
    loss.storage()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static Tape*& current() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorStorage>> outputs_;
  Tape* prev_;
};

// True when an op over these inputs must be recorded.
inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace sttree
