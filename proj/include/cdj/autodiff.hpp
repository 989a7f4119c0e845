#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cdj/nn_ops.hpp"
#include "cdj/tensor.hpp"

namespace cdj {

class Tape;

/// Handle to a tensor value, optionally tracked on a GradientTape. Untracked
/// vars are plain constants: operations on them evaluate forward math only.
/// Copying a Var is cheap; the underlying tensor is shared and immutable.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value) {
    Var v;
    v.value_ = std::make_shared<const Tensor>(std::move(value));
    return v;
  }

  const Tensor& value() const {
    if (!value_) throw std::logic_error("Var: empty handle");
    return *value_;
  }

  /// Gradient of the backward root w.r.t. this value. Valid on tracked vars
  /// after Tape::backward; an untouched tracked var reads as all zeros.
  const Tensor& grad() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Wengert list: an ordered record of executed operations. Each recorded
/// node owns its output value, a gradient buffer, and a backward rule that
/// pulls the output gradient into the node's inputs. backward() replays the
/// rules in reverse execution order. A tape is single-owner and must be
/// reset() before it can record and differentiate again.
class Tape {
 public:
  using BackpropFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Track a leaf value (a network parameter or anything else whose
  /// gradient is wanted).
  Var parameter(Tensor value) { return make_node(std::move(value), nullptr); }

  /// Record an operation output together with its backward rule.
  Var record(Tensor out, BackpropFn fn) {
    return make_node(std::move(out), std::move(fn));
  }

  /// Propagate gradients from `root` (a scalar produced on this tape) to
  /// every tracked node, in reverse execution order.
  void backward(const Var& root) {
    if (root.tape_ != this) {
      throw std::invalid_argument("Tape::backward: root was not produced on this tape");
    }
    if (root.value().size() != 1) {
      throw std::invalid_argument("Tape::backward: root must be a scalar, got " +
                                  root.value().shape_string());
    }
    if (consumed_) {
      throw std::logic_error("Tape::backward: tape already consumed; reset() first");
    }
    consumed_ = true;
    grad_buffer(root.node_) = Tensor(root.value().shape());
    grad_buffer(root.node_)[0] = real(1);
    for (std::size_t i = root.node_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.backprop && !node.grad.empty()) node.backprop(*this, node.grad);
    }
  }

  /// Drop every recorded node and gradient; the tape is fresh again.
  /// Vars handed out before the reset are invalidated.
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  bool consumed() const { return consumed_; }
  std::size_t num_nodes() const { return nodes_.size(); }

  /// Add `delta` into the gradient buffer of `v`. No-op for untracked vars.
  void accumulate(const Var& v, const Tensor& delta) {
    if (!v.tracked()) return;
    if (v.tape_ != this) {
      throw std::logic_error("Tape::accumulate: var belongs to another tape");
    }
    Tensor& g = grad_buffer(v.node_);
    if (g.empty()) {
      g = delta;
    } else {
      add_inplace(g, delta);
    }
  }

  const Tensor& grad_of(const Var& v) {
    if (v.tape_ != this) {
      throw std::logic_error("Tape::grad_of: var belongs to another tape");
    }
    if (!consumed_) {
      throw std::logic_error("Tape::grad_of: backward has not been run");
    }
    Tensor& g = nodes_[v.node_].grad;
    if (g.empty()) g = Tensor(v.value().shape());  // untouched => zero
    return g;
  }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    Tensor grad;
    BackpropFn backprop;
  };

  Var make_node(Tensor value, BackpropFn fn) {
    if (consumed_) {
      throw std::logic_error("Tape: recording on a consumed tape; reset() first");
    }
    Var v;
    v.value_ = std::make_shared<const Tensor>(std::move(value));
    v.tape_ = this;
    v.node_ = nodes_.size();
    nodes_.push_back(Node{v.value_, Tensor(), std::move(fn)});
    return v;
  }

  Tensor& grad_buffer(std::size_t node) { return nodes_[node].grad; }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::grad() const {
  if (!tracked()) throw std::logic_error("Var::grad: var is not tracked on a tape");
  return tape_->grad_of(*this);
}

namespace detail {

/// The single tape shared by a set of operands, nullptr when all are
/// untracked. Mixing tapes is an error.
inline Tape* common_tape(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->tracked()) continue;
    if (tape && tape != v->tape()) {
      throw std::logic_error("operands recorded on different tapes");
    }
    tape = v->tape();
  }
  return tape;
}

}  // namespace detail

// ---- differentiable operations ------------------------------------------

inline Var conv2d(const Var& input, const Var& filters, const Var& bias,
                  int stride, int padding) {
  Tensor out = nn::conv2d(input.value(), filters.value(), bias.value(), stride,
                          padding);
  Tape* tape = detail::common_tape({&input, &filters, &bias});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(
      std::move(out),
      [input, filters, bias, stride, padding](Tape& t, const Tensor& g) {
        if (filters.tracked()) {
          t.accumulate(filters,
                       nn::conv2d_grad_filters(input.value(), g, stride,
                                               padding, filters.value().shape()));
        }
        if (!bias.value().empty() && bias.tracked()) {
          t.accumulate(bias, nn::conv2d_grad_bias(g));
        }
        if (input.tracked()) {
          t.accumulate(input,
                       nn::conv2d_grad_input(filters.value(), g, stride,
                                             padding, input.value().shape()));
        }
      });
}

inline Var relu(const Var& x) {
  Tensor out = nn::relu(x.value());
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [x](Tape& t, const Tensor& g) {
    t.accumulate(x, nn::relu_grad(x.value(), g));
  });
}

inline Var max_pool2d(const Var& x, int window, int stride) {
  std::vector<std::size_t> argmax;
  Tensor out = nn::max_pool2d(x.value(), window, stride, &argmax);
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out),
                      [x, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
                        t.accumulate(x, nn::max_pool2d_grad(x.value().shape(),
                                                            argmax, g));
                      });
}

inline Var global_avg_pool(const Var& x) {
  Tensor out = nn::global_avg_pool(x.value());
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [x](Tape& t, const Tensor& g) {
    t.accumulate(x, nn::global_avg_pool_grad(x.value().shape(), g));
  });
}

inline Var affine(const Var& input, const Var& weights, const Var& bias) {
  Tensor out = nn::affine(input.value(), weights.value(), bias.value());
  Tape* tape = detail::common_tape({&input, &weights, &bias});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [input, weights, bias](Tape& t,
                                                             const Tensor& g) {
    if (weights.tracked()) {
      t.accumulate(weights, nn::affine_grad_weights(input.value(), g));
    }
    if (!bias.value().empty() && bias.tracked()) {
      t.accumulate(bias, nn::affine_grad_bias(g));
    }
    if (input.tracked()) {
      t.accumulate(input, nn::affine_grad_input(weights.value(), g));
    }
  });
}

inline Var softmax_cross_entropy(const Var& logits, std::vector<int> labels) {
  Tensor probs;
  const real loss = nn::softmax_cross_entropy(logits.value(), labels, &probs);
  Tape* tape = detail::common_tape({&logits});
  if (!tape) return Var::constant(Tensor::scalar(loss));
  return tape->record(
      Tensor::scalar(loss),
      [logits, labels = std::move(labels), probs = std::move(probs)](
          Tape& t, const Tensor& g) {
        t.accumulate(logits,
                     nn::softmax_cross_entropy_grad(probs, labels, g[0]));
      });
}

/// Row-major reshape; the flat data is shared unchanged.
inline Var reshape(const Var& x, std::vector<std::size_t> shape) {
  Tensor out(shape, x.value().flat());
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(x.value().shape(), g.flat()));
  });
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_inplace(out, b.value());
  Tape* tape = detail::common_tape({&a, &b});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Tape* tape = detail::common_tape({&a, &b});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [a, b](Tape& t, const Tensor& g) {
    if (a.tracked()) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      t.accumulate(a, ga);
    }
    if (b.tracked()) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      t.accumulate(b, gb);
    }
  });
}

inline Var scale(const Var& x, real s) {
  Tensor out = x.value();
  scale_inplace(out, s);
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(std::move(out));
  return tape->record(std::move(out), [x, s](Tape& t, const Tensor& g) {
    Tensor gx = g;
    scale_inplace(gx, s);
    t.accumulate(x, gx);
  });
}

/// Reduce to a scalar by summation.
inline Var sum(const Var& x) {
  real acc = 0;
  for (std::size_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  Tape* tape = detail::common_tape({&x});
  if (!tape) return Var::constant(Tensor::scalar(acc));
  return tape->record(Tensor::scalar(acc), [x](Tape& t, const Tensor& g) {
    Tensor gx(x.value().shape());
    gx.fill(g[0]);
    t.accumulate(x, gx);
  });
}

}  // namespace cdj
