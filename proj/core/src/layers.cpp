#include "mtnet/layers.hpp"

#include <cmath>

namespace mtnet {

namespace {

Tensor he_uniform(const Shape& shape, int64_t fan_in, RngStream& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

Var apply_act(Tape& t, Var x, Act act) {
  switch (act) {
    case Act::none:
      return x;
    case Act::relu:
      return t.relu(x);
    case Act::sigmoid:
      return t.sigmoid(x);
  }
  return x;
}

}  // namespace

int64_t resize_macs(const Shape& out) { return 4 * shape_numel(out); }
int64_t pool_macs(const Shape& in) { return shape_numel(in); }

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const std::string& name, int in_ch_, int out_ch_, int kernel_, int stride_,
               int dilation_, int padding_, bool with_bias, RngStream& rng)
    : in_ch(in_ch_),
      out_ch(out_ch_),
      kernel(kernel_),
      stride(stride_),
      dilation(dilation_),
      padding(padding_),
      weight(name + ".weight",
             he_uniform({out_ch_, in_ch_, kernel_, kernel_},
                        static_cast<int64_t>(in_ch_) * kernel_ * kernel_, rng)) {
  if (with_bias) bias.emplace(name + ".bias", Tensor::zeros({out_ch_}));
}

Var Conv2d::forward(Tape& t, Var x) {
  Var w = t.param(weight);
  Var y = t.conv2d(x, w, ConvSpec{stride, dilation, padding});
  if (bias) {
    Var b = t.param(*bias);
    Var b4 = t.reshape(b, {1, out_ch, 1, 1});
    y = t.add(y, b4);
  }
  return y;
}

Shape Conv2d::out_shape(const Shape& in) const {
  if (in.size() != 4) throw ShapeError("conv: expected 4-D input shape, got " + shape_str(in));
  if (in[1] != in_ch)
    throw ShapeError("conv: input channels " + shape_str(in) + " do not match layer (" +
                     std::to_string(in_ch) + " expected)");
  int64_t oh = conv_out_extent(in[2], kernel, stride, dilation, padding);
  int64_t ow = conv_out_extent(in[3], kernel, stride, dilation, padding);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv: kernel does not fit input " + shape_str(in));
  return {in[0], out_ch, oh, ow};
}

Introspection Conv2d::stats(const Shape& in) const {
  Shape out = out_shape(in);
  Introspection s;
  s.params = weight.numel() + (bias ? bias->numel() : 0);
  s.macs = static_cast<int64_t>(kernel) * kernel * in_ch * out_ch * out[2] * out[3] * out[0];
  if (bias) s.macs += out[0] * out_ch * out[2] * out[3];
  return s;
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  if (bias) out.push_back(&*bias);
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(const std::string& name, int channels_)
    : channels(channels_),
      gamma(name + ".gamma", Tensor::full({channels_}, 1.0)),
      shift(name + ".shift", Tensor::zeros({channels_})),
      state(channels_) {}

Var BatchNorm2d::forward(Tape& t, Var x, bool training) {
  Var g = t.param(gamma);
  Var s = t.param(shift);
  return t.batch_norm(x, g, s, state, training, momentum, eps);
}

Introspection BatchNorm2d::stats(const Shape& in) const {
  Introspection s;
  s.params = gamma.numel() + shift.numel();
  s.macs = shape_numel(in);
  return s;
}

void BatchNorm2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&shift);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, int in_features_, int out_features_, RngStream& rng)
    : in_features(in_features_),
      out_features(out_features_),
      weight(name + ".weight", he_uniform({out_features_, in_features_}, in_features_, rng)),
      bias(name + ".bias", Tensor::zeros({out_features_})) {}

Var Linear::forward(Tape& t, Var x) {
  Var w = t.param(weight);
  Var b = t.param(bias);
  return t.linear(x, w, b);
}

Introspection Linear::stats(int64_t batch) const {
  Introspection s;
  s.params = weight.numel() + bias.numel();
  s.macs = batch * (static_cast<int64_t>(in_features) * out_features + out_features);
  return s;
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---------------------------------------------------------------- ConvNormAct

ConvNormAct::ConvNormAct(const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                         int dilation, int padding, Act act_, RngStream& rng)
    : conv(name + ".conv", in_ch, out_ch, kernel, stride, dilation, padding, false, rng),
      norm(name + ".norm", out_ch),
      act(act_) {}

Var ConvNormAct::forward(Tape& t, Var x, bool training) {
  Var y = conv.forward(t, x);
  y = norm.forward(t, y, training);
  return apply_act(t, y, act);
}

Introspection ConvNormAct::stats(const Shape& in) const {
  Introspection s = conv.stats(in);
  s += norm.stats(conv.out_shape(in));
  return s;
}

void ConvNormAct::collect(std::vector<Parameter*>& out) {
  conv.collect(out);
  norm.collect(out);
}

// ---------------------------------------------------------------- ResidualBasicBlock

ResidualBasicBlock::ResidualBasicBlock(const std::string& name, int in_ch, int out_ch, int stride,
                                       RngStream& rng)
    : block1(name + ".b1", in_ch, out_ch, 3, stride, 1, 1, Act::relu, rng),
      conv2(name + ".b2.conv", out_ch, out_ch, 3, 1, 1, 1, false, rng),
      norm2(name + ".b2.norm", out_ch) {
  if (in_ch != out_ch || stride != 1)
    projection.emplace(name + ".proj", in_ch, out_ch, 1, stride, 1, 0, Act::none, rng);
}

Var ResidualBasicBlock::forward(Tape& t, Var x, bool training) {
  Var y = block1.forward(t, x, training);
  y = conv2.forward(t, y);
  y = norm2.forward(t, y, training);
  Var skip = projection ? projection->forward(t, x, training) : x;
  return t.relu(t.add(y, skip));
}

Shape ResidualBasicBlock::out_shape(const Shape& in) const {
  return conv2.out_shape(block1.out_shape(in));
}

Introspection ResidualBasicBlock::stats(const Shape& in) const {
  Introspection s = block1.stats(in);
  Shape mid = block1.out_shape(in);
  s += conv2.stats(mid);
  s += norm2.stats(conv2.out_shape(mid));
  if (projection) s += projection->stats(in);
  return s;
}

void ResidualBasicBlock::collect(std::vector<Parameter*>& out) {
  block1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
  if (projection) projection->collect(out);
}

}  // namespace mtnet
