#include "musp/nn.hpp"

#include <cmath>

namespace musp {

void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
}

Conv2d::Conv2d(int c_in, int c_out, Rng& rng) {
  kernel = Tensor({3, 3, c_in, c_out});
  bias = Tensor({c_out});
  init_uniform_fan_in(kernel, 9 * c_in, rng);
  kernel.set_requires_grad(true);
  bias.set_requires_grad(true);
}

Linear::Linear(int r_in, int r_out, Rng& rng, bool with_bias) {
  weight = Tensor({r_in, r_out});
  init_uniform_fan_in(weight, r_in, rng);
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = Tensor({r_out});
    bias.set_requires_grad(true);
  }
}

BatchNorm::BatchNorm(int channels) {
  gamma = Tensor::full({channels}, 1.0);
  beta = Tensor({channels});
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  running_mean.assign(static_cast<size_t>(channels), 0.0);
  running_var.assign(static_cast<size_t>(channels), 1.0);
}

void adam_step(std::vector<double>& param, const std::vector<double>& grad,
               std::vector<double>& m, std::vector<double>& v, int64_t t, double lr,
               double weight_decay, double beta1, double beta2, double eps) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

Adam::Adam(std::vector<Tensor> params, double weight_decay)
    : params_(std::move(params)), weight_decay_(weight_decay) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  for (size_t i = 0; i < params_.size(); ++i) {
    adam_step(params_[i].values(), params_[i].grad(), m_[i], v_[i], t_, lr, weight_decay_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace musp
