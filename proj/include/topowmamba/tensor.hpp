#pragma once

#include <functional>
#include <memory>
#include <utility>

#include "topowmamba/common.hpp"

namespace twm {

// Dense row-major tensor with shared storage. Copying a Tensor copies the
// handle, not the buffer; ops allocate fresh outputs. The gradient buffer is
// allocated lazily on first accumulation.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value);
  // Uninitialized storage for op outputs; values must be fully written.
  static Tensor uninit(const Shape& shape, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(s_->shape.size()); }
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->v.size()); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) { s_->requires_grad = rg; }

  T* data() { return s_->v.data(); }
  const T* data() const { return s_->v.data(); }
  std::vector<T>& values() { return s_->v; }
  const std::vector<T>& values() const { return s_->v; }
  T item() const;

  bool has_grad() const { return s_ && !s_->g.empty(); }
  // Grad buffer, zero-initialized on first use.
  T* grad();
  const std::vector<T>* grad_vec() const { return s_->g.empty() ? nullptr : &s_->g; }
  std::vector<T> grad_dense() const;
  void zero_grad() { s_->g.clear(); }

  // Stable identity of the underlying storage.
  const void* id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> v;
    std::vector<T> g;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;

  static Tensor wrap(std::shared_ptr<Storage> s) {
    Tensor t;
    t.s_ = std::move(s);
    return t;
  }
};

// Wengert list of recorded ops. Recording happens while a Tape::Scope is
// alive on the current thread; one backward pass per recording.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active();

  void record(const char* op, std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(backward)});
  }

  // Reverse-topological accumulation from a scalar loss.
  void backward(Tensor<T> loss);

  std::size_t size() const { return entries_.size(); }
  bool spent() const { return spent_; }
  void clear() {
    entries_.clear();
    spent_ = false;
  }

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
  bool spent_ = false;
};

template <typename T>
bool recording() {
  return Tape<T>::active() != nullptr;
}

// Throws NumericError if any value is non-finite; used on every op output.
template <typename T>
void check_finite(const char* op, const Tensor<T>& t);

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& x) {
  std::vector<To> out(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) out[static_cast<std::size_t>(i)] = static_cast<To>(x.data()[i]);
  return Tensor<To>::from_data(x.shape(), std::move(out), x.requires_grad());
}

}  // namespace twm
