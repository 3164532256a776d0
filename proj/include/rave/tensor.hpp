#pragma once

// Dense rank-<=4 tensors (channel-last layout) with an explicit reverse-mode
// gradient tape. Scalar type is a template parameter: float is used for
// training and inference, double for gradient checking.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rave {

using Index = std::int64_t;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Shape of a tensor, at most rank 4. Layout convention is channel-last:
// [T|N, H, W, C] for sequences, [H, W, C] for frames, [k, k, Cin, Cout]
// for convolution weights.
class TensorShape {
 public:
  static constexpr int kMaxRank = 4;

  TensorShape() = default;
  TensorShape(std::initializer_list<Index> dims) {
    if (static_cast<int>(dims.size()) > kMaxRank) {
      throw ShapeError("TensorShape: rank > 4 not supported");
    }
    for (Index d : dims) {
      if (d <= 0) throw ShapeError("TensorShape: non-positive extent " + std::to_string(d));
      dims_[rank_++] = d;
    }
  }

  int rank() const { return rank_; }
  Index dim(int i) const {
    if (i < 0 || i >= rank_) throw ShapeError("TensorShape: axis " + std::to_string(i) + " out of range for rank " + std::to_string(rank_));
    return dims_[i];
  }
  Index count() const {
    Index n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }
  bool operator==(const TensorShape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }
  bool operator!=(const TensorShape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[";
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << "]";
    return os.str();
  }

 private:
  std::array<Index, kMaxRank> dims_{};
  int rank_ = 0;
};

template <typename S>
class GradientTape;

// Value-semantic tensor; the flat value buffer is shared between copies and
// treated as immutable once an operation has produced it. The only sanctioned
// in-place mutations are parameter initialization and optimizer updates,
// which happen outside any live tape.
template <typename S>
struct Tensor {
  using Scalar = S;
  static constexpr std::int64_t kNoSlot = -1;

  TensorShape shape;
  std::shared_ptr<std::vector<S>> store;
  bool requires_grad = false;
  std::int64_t slot = kNoSlot;  // gradient slot on the tape identified below
  std::int64_t tape_id = 0;     // which tape the slot belongs to

  Tensor() = default;

  static Tensor zeros(TensorShape sh) {
    Tensor t;
    t.shape = sh;
    t.store = std::make_shared<std::vector<S>>(static_cast<std::size_t>(sh.count()), S(0));
    return t;
  }

  static Tensor full(TensorShape sh, S v) {
    Tensor t = zeros(sh);
    for (auto& x : *t.store) x = v;
    return t;
  }

  static Tensor scalar(S v) { return full(TensorShape{1}, v); }

  static Tensor from(TensorShape sh, std::vector<S> values) {
    if (static_cast<Index>(values.size()) != sh.count()) {
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + sh.str());
    }
    Tensor t;
    t.shape = sh;
    t.store = std::make_shared<std::vector<S>>(std::move(values));
    return t;
  }

  Index size() const { return shape.count(); }
  bool defined() const { return static_cast<bool>(store); }
  bool on_tape() const { return slot != kNoSlot; }

  const std::vector<S>& values() const { return *store; }
  std::vector<S>& mutable_values() { return *store; }
  const S* data() const { return store->data(); }
  S* data() { return store->data(); }

  S value() const {
    if (size() != 1) throw ShapeError("Tensor::value: tensor " + shape.str() + " is not scalar");
    return (*store)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.store = std::make_shared<std::vector<S>>(*store);
    t.requires_grad = requires_grad;
    return t;
  }

  // Detached view: same values, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.store = store;
    return t;
  }

  bool all_finite() const {
    for (S v : *store)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

// Ordered record of executed differentiable operations. Construction makes
// the tape active for scalar type S on this thread; operations append a
// backward closure when any of their inputs carries a gradient slot.
// backward() replays the record once, in reverse.
template <typename S>
class GradientTape {
 public:
  GradientTape() : id_(next_id()++) {
    if (active_ptr() != nullptr) {
      throw TapeError("GradientTape: another tape is already active on this thread");
    }
    active_ptr() = this;
  }
  ~GradientTape() {
    if (active_ptr() == this) active_ptr() = nullptr;
  }
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active() { return active_ptr(); }

  std::int64_t id() const { return id_; }

  // True when t carries a live slot on this tape; slots from other (dead)
  // tapes are ignored, so stale parameter slots cannot leak across tapes.
  bool tracks(const Tensor<S>& t) const { return t.slot != Tensor<S>::kNoSlot && t.tape_id == id_; }

  // Registers a leaf tensor (typically a parameter) for gradient tracking.
  void watch(Tensor<S>& t) {
    if (!t.requires_grad) {
      throw TapeError("GradientTape::watch: tensor does not require gradients");
    }
    if (!tracks(t)) {
      t.slot = alloc_slot(t.size());
      t.tape_id = id_;
    }
  }

  std::int64_t alloc_slot(Index n) {
    grads_.emplace_back(static_cast<std::size_t>(n), S(0));
    return static_cast<std::int64_t>(grads_.size()) - 1;
  }

  // Allocates a gradient slot for a freshly produced operation output.
  void track_output(Tensor<S>& t) {
    t.slot = alloc_slot(t.size());
    t.tape_id = id_;
  }

  std::vector<S>& grad_buffer(std::int64_t slot) { return grads_.at(static_cast<std::size_t>(slot)); }

  void record(std::function<void(GradientTape&)> fn) { records_.push_back(std::move(fn)); }

  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor<S>& loss) {
    if (consumed_) {
      throw TapeError("GradientTape::backward: tape already consumed; call reset() first");
    }
    if (loss.size() != 1) {
      throw TapeError("GradientTape::backward: loss must be scalar, got " + loss.shape.str());
    }
    if (!tracks(loss)) {
      throw TapeError("GradientTape::backward: loss is not recorded on this tape");
    }
    grad_buffer(loss.slot).assign(1, S(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      (*it)(*this);
    }
    consumed_ = true;
  }

  // Gradient of the last backward() with respect to t. Zero if t never
  // received contributions.
  Tensor<S> gradient(const Tensor<S>& t) const {
    if (!tracks(t)) {
      throw TapeError("GradientTape::gradient: tensor has no slot on this tape (was it watched?)");
    }
    const auto& g = grads_.at(static_cast<std::size_t>(t.slot));
    Tensor<S> out = Tensor<S>::zeros(t.shape);
    out.mutable_values().assign(g.begin(), g.end());
    return out;
  }

  // Clears all records and gradient buffers. Slots handed out before the
  // reset are invalidated; watched tensors must be watched again.
  void reset() {
    records_.clear();
    grads_.clear();
    consumed_ = false;
    id_ = next_id()++;
  }

 private:
  static GradientTape*& active_ptr() {
    thread_local GradientTape* p = nullptr;
    return p;
  }
  static std::int64_t& next_id() {
    thread_local std::int64_t n = 1;
    return n;
  }

  std::vector<std::function<void(GradientTape&)>> records_;
  std::vector<std::vector<S>> grads_;
  std::int64_t id_ = 0;
  bool consumed_ = false;
};

namespace detail {

template <typename S>
inline GradientTape<S>* tape_for() {
  return GradientTape<S>::active();
}

template <typename S, typename... Rest>
inline GradientTape<S>* tape_if_tracked(const Tensor<S>& first, const Rest&... rest) {
  GradientTape<S>* tape = GradientTape<S>::active();
  if (!tape) return nullptr;
  bool tracked = tape->tracks(first);
  ((tracked = tracked || tape->tracks(rest)), ...);
  return tracked ? tape : nullptr;
}

template <typename S>
inline std::int64_t slot_of(const GradientTape<S>& tape, const Tensor<S>& t) {
  return tape.tracks(t) ? t.slot : Tensor<S>::kNoSlot;
}

template <typename S>
inline void debug_check_finite(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value produced from finite inputs");
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace detail

}  // namespace rave
