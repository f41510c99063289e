#include "actflow/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace actflow {

EvolutionSample make_path_sample(const Tensor& a_gt, const Tensor& noise, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw std::invalid_argument("make_path_sample: tau " + std::to_string(tau) +
                                " outside [0, 1]");
  if (a_gt.shape() != noise.shape())
    throw std::invalid_argument("make_path_sample: shape mismatch " + shape_str(a_gt.shape()) +
                                " vs " + shape_str(noise.shape()));
  EvolutionSample s;
  s.a_gt = a_gt;
  s.noise = noise;
  s.tau = tau;
  s.a_tau = Tensor::zeros(a_gt.shape());
  s.v_gt = Tensor::zeros(a_gt.shape());
  for (std::int64_t i = 0; i < a_gt.size(); ++i) {
    s.a_tau.data()[i] = tau * a_gt.data()[i] + (1.0 - tau) * noise.data()[i];
    s.v_gt.data()[i] = a_gt.data()[i] - noise.data()[i];
  }
  return s;
}

double timestep_from_uniform(double u, const TimestepSamplerConfig& cfg) {
  if (!(cfg.cutoff > 0.0 && cfg.cutoff < 1.0))
    throw std::invalid_argument("timestep sampler: cutoff must lie in (0, 1)");
  if (cfg.beta_b != 1.0)
    throw std::invalid_argument("timestep sampler: inverse-CDF form requires beta_b == 1");
  const double beta_draw = std::pow(u, 1.0 / cfg.beta_a);
  return cfg.cutoff * (1.0 - beta_draw);
}

double sample_timestep(Rng& rng, const TimestepSamplerConfig& cfg) {
  return timestep_from_uniform(rng.uniform(), cfg);
}

Tensor fm_residual_loss(const Tensor& v_hat, const Tensor& v_gt) {
  if (v_hat.shape() != v_gt.shape())
    throw std::invalid_argument("fm_residual_loss: shape mismatch " + shape_str(v_hat.shape()) +
                                " vs " + shape_str(v_gt.shape()));
  return sum_squares(sub(v_hat, v_gt));
}

Tensor integrate_euler(const VelocityFn& velocity, const Shape& chunk_shape,
                       const InferenceConfig& cfg, Rng& rng) {
  if (cfg.steps < 1) throw std::invalid_argument("integrate_euler: steps must be >= 1");
  Tensor a = randn(chunk_shape, rng);
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    const double tau = static_cast<double>(k) * dt;
    Tensor v = velocity(a, tau);
    if (v.shape() != a.shape())
      throw std::invalid_argument("integrate_euler: velocity shape " + shape_str(v.shape()) +
                                  " does not match chunk " + shape_str(a.shape()));
    Tensor next = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i)
      next.data()[i] = a.data()[i] + dt * v.data()[i];
    a = next;
  }
  return a;
}

Tensor integrate_euler(const PolicyNet& net, const ParamSet& params,
                       const SemanticFeatures& features, const Tensor& robot_state,
                       const InferenceConfig& cfg, Rng& rng) {
  const PolicyConfig& pc = net.config();
  auto field = [&](const Tensor& a_tau, double tau) {
    return net.predict_velocity(features, a_tau, robot_state, tau, params);
  };
  return integrate_euler(field, {pc.chunk_len, pc.action_dim}, cfg, rng);
}

}  // namespace actflow
