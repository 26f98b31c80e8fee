#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/rng.hpp>

namespace rvp {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorImpl;

// One differentiable op in the graph, attached to its output tensor.
// `backward` reads the output's grad and accumulates into input grads.
struct GradNode {
  const char* op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;

  int64_t numel() const { return shape_numel(shape); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

// Thread-local autograd switch. Graphs never cross threads, so a
// thread-local flag is the whole synchronization story.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantic handle onto a shared TensorImpl. Copies alias the same
// storage; ops return fresh impls. Row-major, contiguous, f32.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : impl_(std::make_shared<TensorImpl>()) {
    validate_shape(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(size_t(impl_->numel()), 0.0f);
  }

  Tensor(Shape shape, std::vector<float> data)
      : impl_(std::make_shared<TensorImpl>()) {
    validate_shape(shape);
    if (int64_t(data.size()) != shape_numel(shape))
      throw dimension_error("tensor: data size " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, float v) {
    Tensor t(std::move(shape));
    for (float& x : t.impl_->data) x = v;
    return t;
  }

  static Tensor scalar(float v) { return full({1}, v); }

  static Tensor randn(Shape shape, Rng& rng, float std_dev = 1.0f) {
    Tensor t(std::move(shape));
    for (float& x : t.impl_->data) x = float(rng.normal()) * std_dev;
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi) {
    Tensor t(std::move(shape));
    for (float& x : t.impl_->data) x = float(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return bool(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int64_t ndim() const { return int64_t(impl_->shape.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[size_t(i)]; }
  int64_t numel() const { return impl_->numel(); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& vec() { return impl_->data; }
  const std::vector<float>& vec() const { return impl_->data; }

  float item() const {
    if (numel() != 1) throw dimension_error("item: tensor is not scalar");
    return impl_->data[0];
  }

  float flat(int64_t i) const { return impl_->data[size_t(i)]; }

  float at(std::initializer_list<int64_t> idx) const {
    if (int64_t(idx.size()) != ndim())
      throw dimension_error("at: index rank mismatch");
    int64_t off = 0, d = 0;
    for (int64_t i : idx) off = off * impl_->shape[size_t(d++)] + i;
    return impl_->data[size_t(off)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<float>& grad_vec() {
    impl_->ensure_grad();
    return impl_->grad;
  }

  // Copy of the gradient as a plain tensor (zeros if never accumulated).
  Tensor grad() const {
    Tensor g(impl_->shape);
    if (!impl_->grad.empty()) g.impl_->data = impl_->grad;
    return g;
  }

  void zero_grad() {
    if (impl_ && !impl_->grad.empty())
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }

  // Same data, no graph history.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  // Reverse-mode sweep from a scalar. Leaf grads accumulate (+=), so calling
  // twice without zeroing doubles them; grads of op outputs are scratch and
  // reset at the start of each sweep.
  void backward() const {
    if (!impl_) throw dimension_error("backward: undefined tensor");
    if (numel() != 1)
      throw dimension_error("backward: loss must be a scalar, got " +
                            shape_str(impl_->shape));

    // Iterative post-order DFS over impls reachable through grad nodes.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
      TensorImpl* t;
      size_t next;
    };
    std::vector<Frame> stack;
    if (impl_->node) {
      stack.push_back({impl_.get(), 0});
      seen.insert(impl_.get());
    }
    while (!stack.empty()) {
      Frame& f = stack.back();
      auto& ins = f.t->node->inputs;
      bool descended = false;
      while (f.next < ins.size()) {
        TensorImpl* in = ins[f.next++].get();
        if (in->node && !seen.count(in)) {
          seen.insert(in);
          stack.push_back({in, 0});
          descended = true;
          break;
        }
      }
      if (!descended && f.next >= ins.size()) {
        order.push_back(f.t);
        stack.pop_back();
      }
    }
    // Non-leaf grads are per-sweep scratch.
    for (TensorImpl* t : order) t->grad.clear();
    impl_->ensure_grad();
    impl_->grad[0] += 1.0f;

    // Post-order lists inputs before consumers; walk it backwards so every
    // impl has its full incoming gradient before its node fires.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorImpl* t = *it;
      if (t->grad.empty()) continue;  // no gradient flowed here
      t->node->backward(*t);
    }
  }

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw dimension_error("tensor: empty shape");
    for (int64_t d : s)
      if (d <= 0)
        throw dimension_error("tensor: non-positive dim in " + shape_str(s));
  }

  std::shared_ptr<TensorImpl> impl_;
};

// Shared tail for op implementations: wraps computed data in a tensor and,
// when autograd is on and any input needs grads, attaches the grad node.
inline Tensor make_op_result(Shape shape, std::vector<float> data,
                             const char* op, std::vector<Tensor> inputs,
                             std::function<void(TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  bool need = false;
  if (grad_mode())
    for (const Tensor& t : inputs)
      if (t.requires_grad()) need = true;
  if (need) {
    auto node = std::make_shared<GradNode>();
    node->op = op;
    for (Tensor& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.set_requires_grad(true);
  }
  return out;
}

}  // namespace rvp
