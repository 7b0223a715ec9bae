#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtnet/autograd.hpp"
#include "mtnet/rng.hpp"

namespace mtnet {

/// MAC accounting conventions (GFLOPs are reported as 2*MACs/1e9):
///   conv    K*K*Cin*Cout*OH*OW, plus OH*OW*Cout when biased
///   linear  B*Cin*Cout, plus B*Cout when biased
///   norm    one MAC per output element (scale-shift)
///   resize  four MACs per output element (4-tap blend)
///   pool    one MAC per input element
///   relu/sigmoid/add/mul  not counted
struct Introspection {
  int64_t params = 0;
  int64_t macs = 0;

  Introspection& operator+=(const Introspection& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
};

class Conv2d {
 public:
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int dilation,
         int padding, bool with_bias, RngStream& rng);

  Var forward(Tape& t, Var x);
  Shape out_shape(const Shape& in) const;
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  int in_ch, out_ch, kernel, stride, dilation, padding;
  Parameter weight;
  std::optional<Parameter> bias;
};

class BatchNorm2d {
 public:
  BatchNorm2d(const std::string& name, int channels);

  Var forward(Tape& t, Var x, bool training);
  Shape out_shape(const Shape& in) const { return in; }
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  int channels;
  double momentum = 0.1;
  double eps = 1e-5;
  Parameter gamma;
  Parameter shift;
  BatchNormState state;  // running stats, updated on training forward
};

class Linear {
 public:
  Linear(const std::string& name, int in_features, int out_features, RngStream& rng);

  Var forward(Tape& t, Var x);
  Introspection stats(int64_t batch) const;
  void collect(std::vector<Parameter*>& out);

  int in_features, out_features;
  Parameter weight;
  Parameter bias;
};

enum class Act { none, relu, sigmoid };

/// conv -> per-channel norm -> activation. The conv carries no bias (the
/// norm shift subsumes it).
class ConvNormAct {
 public:
  ConvNormAct(const std::string& name, int in_ch, int out_ch, int kernel, int stride,
              int dilation, int padding, Act act, RngStream& rng);

  Var forward(Tape& t, Var x, bool training);
  Shape out_shape(const Shape& in) const { return conv.out_shape(in); }
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  Conv2d conv;
  BatchNorm2d norm;
  Act act;
};

/// Two 3x3 conv-norm pairs with a skip; identity skip when the shape is
/// preserved, 1x1-projected otherwise. out = relu(chain(x) + skip(x)).
class ResidualBasicBlock {
 public:
  ResidualBasicBlock(const std::string& name, int in_ch, int out_ch, int stride, RngStream& rng);

  Var forward(Tape& t, Var x, bool training);
  Shape out_shape(const Shape& in) const;
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  ConvNormAct block1;
  Conv2d conv2;
  BatchNorm2d norm2;
  std::optional<ConvNormAct> projection;  // Act::none when present
};

int64_t resize_macs(const Shape& out);
int64_t pool_macs(const Shape& in);

}  // namespace mtnet
