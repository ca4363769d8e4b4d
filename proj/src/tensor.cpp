#include "topowmamba/tensor.hpp"

#include <cmath>

namespace twm {

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->v.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  s->requires_grad = requires_grad;
  return wrap(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::uninit(const Shape& shape, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->v.resize(static_cast<std::size_t>(shape_numel(shape)));
  s->requires_grad = requires_grad;
  return wrap(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  for (const auto& x : values)
    if (!std::isfinite(static_cast<double>(x))) throw NumericError("non-finite value in tensor data");
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->v = std::move(values);
  s->requires_grad = requires_grad;
  return wrap(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({}, {value}, false);
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t i) const {
  const auto r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return s_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
  return s_->v[0];
}

template <typename T>
T* Tensor<T>::grad() {
  if (s_->g.empty()) s_->g.assign(s_->v.size(), T(0));
  return s_->g.data();
}

template <typename T>
std::vector<T> Tensor<T>::grad_dense() const {
  if (!s_->g.empty()) return s_->g;
  return std::vector<T>(s_->v.size(), T(0));
}

namespace {
template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) {
  prev_ = active_tape_slot<T>();
  active_tape_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_tape_slot<T>() = prev_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape_slot<T>();
}

template <typename T>
void Tape<T>::backward(Tensor<T> loss) {
  if (spent_) throw NumericError("tape already consumed by a previous backward pass");
  if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw NumericError("loss does not require grad; nothing to differentiate");
  spent_ = true;
  loss.grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(t.data()[i]))) {
      std::string where = OpScope::current();
      std::string msg = std::string("non-finite value in output of ") + op;
      if (!where.empty()) msg += " at " + where;
      throw NumericError(msg);
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void check_finite<float>(const char*, const Tensor<float>&);
template void check_finite<double>(const char*, const Tensor<double>&);

}  // namespace twm
