#pragma once

#include <string>
#include <vector>

#include "musp/rng.hpp"
#include "musp/tensor.hpp"

namespace musp {

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng);

/// 3x3 convolution layer, zero padding 1. Kernel [3,3,c_in,c_out], bias zero-init.
struct Conv2d {
  Tensor kernel;
  Tensor bias;

  Conv2d() = default;
  Conv2d(int c_in, int c_out, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, kernel, bias); }
  int in_channels() const { return kernel.dim(2); }
  int out_channels() const { return kernel.dim(3); }
};

/// Affine layer; pass with_bias=false for the bias-free classifier.
struct Linear {
  Tensor weight;  // [r_in, r_out]
  Tensor bias;    // undefined when bias-free

  Linear() = default;
  Linear(int r_in, int r_out, Rng& rng, bool with_bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }
};

/// Batch normalization over the trailing channel axis; scale 1 / shift 0 init,
/// running statistics tracked by exponential moving average.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(int channels);
  Tensor forward(const Tensor& x, bool training, bool update_running = true) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, update_running, eps,
                      momentum);
  }
  int channels() const { return gamma.dim(0); }
};

/// One Adam update on a raw parameter buffer. Weight decay is added to the
/// gradient before the moment updates; bias-corrected moments, betas
/// (0.9, 0.999), epsilon 1e-8. `t` is the 1-based step index.
void adam_step(std::vector<double>& param, const std::vector<double>& grad,
               std::vector<double>& m, std::vector<double>& v, int64_t t, double lr,
               double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

/// Adam over a set of leaf tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double weight_decay);

  void step(double lr);
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }
  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_;
  int64_t t_ = 0;
};

}  // namespace musp
