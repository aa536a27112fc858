#pragma once

// Dense row-major float64 tensors and the tape that records their history.
//
// A Tensor is an immutable value: a shape, a shared buffer and, when it was
// produced while a Tape was active, the id of the node that produced it.
// Operations never mutate their inputs, so copying a Tensor is cheap and
// snapshots of parameters stay valid for as long as anyone holds them.
//
// The Tape is append-only. Node ids are assigned in creation order, which is
// a valid topological order. Backward functions are written in terms of
// ordinary recorded operations, so running a backward pass with
// create_graph enabled extends the same tape and the resulting gradients can
// be differentiated again.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2a/errors.hpp"

namespace l2a {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tape;

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    for (auto d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape_));
    }
    if (static_cast<std::int64_t>(data_->size()) != l2a::numel(shape_)) {
      throw ShapeError("tensor of shape " + to_string(shape_) + " given " +
                       std::to_string(data_->size()) + " values");
    }
  }

  static Tensor zeros(Shape shape) {
    auto n = l2a::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }
  static Tensor full(Shape shape, double value) {
    auto n = l2a::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
  }
  static Tensor scalar(double value) { return Tensor({}, {value}); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const {
    return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i));
  }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  std::span<const double> values() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  const double* data() const { return data_->data(); }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + to_string(shape_));
    }
    return (*data_)[0];
  }

  /// Node id on the tape that produced this tensor, or -1 for constants.
  std::int64_t node_id() const { return node_; }

  /// True when this tensor is tracked by the currently active tape.
  inline bool requires_grad() const;

  /// Same values, no history.
  Tensor detach() const {
    Tensor t = *this;
    t.node_ = -1;
    t.tape_serial_ = 0;
    return t;
  }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::int64_t node_ = -1;
  std::uint64_t tape_serial_ = 0;
};

/// Computes gradients for a node's inputs from the gradient of its output.
/// `need` has bit j set when input j's gradient is wanted; entries for
/// unwanted or non-differentiable inputs may be left undefined.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad_out, unsigned need)>;

struct Node {
  std::string_view kind;
  std::vector<std::int64_t> inputs;
  BackwardFn backward;
  Tensor output;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
inline thread_local bool grad_enabled = true;
inline std::uint64_t next_tape_serial() {
  static std::atomic<std::uint64_t> serial{0};
  return ++serial;
}
}  // namespace detail

class Tape {
 public:
  Tape() : serial_(detail::next_tape_serial()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }

  std::size_t size() const { return nodes_.size(); }
  int generation() const { return generation_; }
  const Node& node(std::int64_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// Marks the start of a new differentiation pass over this tape.
  int begin_pass() { return ++generation_; }

  bool owns(const Tensor& t) const { return t.node_ >= 0 && t.tape_serial_ == serial_; }

  /// Registers `t` as a leaf whose gradient can be requested.
  Tensor watch(const Tensor& t) {
    Tensor out = t;
    out.node_ = static_cast<std::int64_t>(nodes_.size());
    out.tape_serial_ = serial_;
    nodes_.push_back(Node{"leaf", {}, {}, out});
    return out;
  }

  /// Appends a node when recording is enabled and at least one input is
  /// tracked here. Returns `result`, tagged with its node id if recorded.
  Tensor record(std::string_view kind, Tensor result, std::initializer_list<const Tensor*> inputs,
                BackwardFn backward) {
    if (!detail::grad_enabled) return result;
    std::vector<std::int64_t> ids;
    ids.reserve(inputs.size());
    bool any = false;
    for (const Tensor* in : inputs) {
      if (owns(*in)) {
        ids.push_back(in->node_);
        any = true;
      } else {
        ids.push_back(-1);
      }
    }
    if (!any) return result;
    result.node_ = static_cast<std::int64_t>(nodes_.size());
    result.tape_serial_ = serial_;
    nodes_.push_back(Node{kind, std::move(ids), std::move(backward), result});
    return result;
  }

 private:
  std::uint64_t serial_;
  std::deque<Node> nodes_;
  int generation_ = 0;
};

inline bool Tensor::requires_grad() const {
  const Tape* tape = Tape::active();
  return tape && tape->owns(*this);
}

/// Makes `tape` the active tape of this thread for the guard's lifetime.
class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeGuard() { detail::active_tape = previous_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Records `result` on the active tape, if any.
inline Tensor record(std::string_view kind, Tensor result,
                     std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  Tape* tape = active_tape;
  if (!tape) return result;
  return tape->record(kind, std::move(result), inputs, std::move(backward));
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_rank(std::string_view op, const Tensor& t, std::int64_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline void require_finite(std::string_view what, const Tensor& t) {
  if (!all_finite(t.values())) {
    throw NumericFault(std::string(what) + ": non-finite value");
  }
}

}  // namespace detail
}  // namespace l2a
