#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtnet/tensor.hpp"

namespace mtnet {

/// Handle into a Tape. Vars are only valid for the tape that created them.
struct Var {
  int32_t id = -1;
  uint32_t tape = 0;
};

struct ConvSpec {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

/// Named tensor with a gradient slot. Layers own their Parameters; a Tape
/// binds them as leaves during forward (by reference, no copy) and
/// backward() accumulates straight into grad. The grad buffer materializes
/// on first use. Updates are externally synchronized (single writer).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // empty scalar until first backward / zero_grad

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  int64_t numel() const { return value.numel(); }
  void zero_grad() {
    if (grad.shape() == value.shape()) {
      double* g = grad.data();
      for (int64_t i = 0; i < grad.numel(); ++i) g[i] = 0.0;
    } else {
      grad = Tensor::zeros(value.shape());
    }
  }
  void ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor::zeros(value.shape());
  }
};

/// Running statistics for normalization layers, updated on training forward.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;

  explicit BatchNormState(int64_t channels)
      : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}
};

/// Reverse-mode tape. Records one forward pass; backward() walks the nodes
/// in reverse. Values are immutable once recorded. Single-threaded per tape;
/// independent tapes may run concurrently.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var param(Parameter& p);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;

  // Elementwise and structural ops.
  Var relu(Var x);
  /// Logistic gate, clamped into the open unit interval at the
  /// representable boundaries so outputs are strictly inside (0,1) for
  /// every finite input.
  Var sigmoid(Var x);
  /// Elementwise addition; b's extents must each equal a's or be 1
  /// (channel bias BxCx1x1, spatial map Bx1xHxW, or same shape).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  /// BxCxHxW scaled per channel by BxCx1x1.
  Var mul_channelwise(Var h, Var alpha);
  Var scale(Var x, double c);
  Var sum(Var x);
  Var reshape(Var x, Shape shape);
  Var concat_channels(Var a, Var b);
  Var slice_channels(Var x, int64_t begin, int64_t end);

  /// Cross-correlation, square odd kernel, fixed loop nest (bit-exact reruns).
  Var conv2d(Var input, Var weight, const ConvSpec& spec);
  /// (B,Cin) x (Cout,Cin) + (Cout).
  Var linear(Var input, Var weight, Var bias);
  /// Per-channel normalization. Training mode uses biased batch statistics
  /// and updates `state`; eval mode normalizes with the running statistics.
  Var batch_norm(Var input, Var gamma, Var shift, BatchNormState& state, bool training,
                 double momentum = 0.1, double eps = 1e-5);
  /// Integer upscale with half-pixel centers (no corner alignment); edges
  /// replicate. scale == 1 is the identity.
  Var bilinear_resize(Var x, int scale);
  Var global_avg_pool(Var x);

  // Fused losses (targets are plain tensors, not differentiated).
  /// Mean cross-entropy over non-ignored pixels, log-sum-exp stabilized.
  /// All pixels ignored yields 0 and sets *all_ignored.
  Var softmax_cross_entropy(Var logits, const Tensor& labels, int64_t ignore_index,
                            bool* all_ignored = nullptr);
  /// Mean smooth-L1 over entries selected by mask (mask broadcast over
  /// channels). Empty mask yields 0 and sets *empty_mask.
  Var smooth_l1(Var pred, const Tensor& target, const Tensor& mask, bool* empty_mask = nullptr);
  Var l1_masked(Var pred, const Tensor& target, const Tensor& mask);
  /// Penalty-reduced focal loss on sigmoid(logits) against a [0,1] heatmap:
  /// peaks (y == 1) weighted (1-p)^2 log p, elsewhere (1-y)^4 p^2 log(1-p),
  /// normalized by the peak count (>= 1).
  Var focal_heatmap(Var logits, const Tensor& target);
  /// Cross-entropy over channel bins at mask-selected cells.
  Var bin_cross_entropy(Var logits, const Tensor& bins, const Tensor& mask);
  /// L1 between pred[b, bins[b,0,y,x], y, x] and target at masked cells.
  Var select_channel_l1(Var pred, const Tensor& bins, const Tensor& target, const Tensor& mask);

  /// Reverse pass from a scalar loss. Gradients for bound parameters
  /// accumulate directly into Parameter::grad (materialized as zeros first,
  /// including parameters unreachable from the loss). Errors on a
  /// non-scalar loss or on a Var that was not recorded on this tape.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  size_t num_values() const { return values_.size(); }
  const std::vector<std::pair<Parameter*, Var>>& param_bindings() const { return bindings_; }

 private:
  struct Node {
    int32_t out;
    std::function<void(Tape&)> back;
  };

  uint32_t tape_id_;
  // Deque so references handed out by value() stay valid while further ops
  // are recorded.
  std::deque<Tensor> values_;           // empty for parameter leaves
  std::vector<const Tensor*> extern_;   // non-null: value lives in a Parameter
  std::vector<Parameter*> param_of_;    // non-null: grads go to the Parameter
  std::vector<char> needs_grad_;
  std::deque<Tensor> grads_;
  std::vector<char> has_grad_;
  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter*, Var>> bindings_;
  std::unordered_map<const Parameter*, int32_t> bound_;
  bool backward_done_ = false;

  Var push(Tensor t, bool needs);
  void record(int32_t out, std::function<void(Tape&)> back);
  void check(Var v, const char* who) const;
  const Tensor& val(int32_t id) const {
    const Tensor* ext = extern_[static_cast<size_t>(id)];
    return ext ? *ext : values_[static_cast<size_t>(id)];
  }
  Tensor& gslot(int32_t id);
  bool needs(int32_t id) const { return needs_grad_[static_cast<size_t>(id)] != 0; }

  friend struct TapeOps;
};

/// Output spatial extent of a convolution along one axis.
int64_t conv_out_extent(int64_t in, int kernel, int stride, int dilation, int padding);

}  // namespace mtnet
