#pragma once

#include <functional>

#include "actflow/policy.hpp"
#include "actflow/rng.hpp"
#include "actflow/tensor.hpp"

namespace actflow {

// One point on the linear noise-to-action path:
//   a_tau = tau * a_gt + (1 - tau) * noise,   v_gt = a_gt - noise.
// v_gt does not depend on tau.
struct EvolutionSample {
  Tensor a_gt;
  Tensor noise;
  double tau = 0.0;
  Tensor a_tau;
  Tensor v_gt;
};

EvolutionSample make_path_sample(const Tensor& a_gt, const Tensor& noise, double tau);

// Timestep law: tau = s * (1 - u) with u ~ Beta(a, 1), sampled by inverse
// CDF u = U^(1/a). With the defaults, tau lies in [0, 0.999] and
// E[tau] = s * (1 - a/(a+1)) = 0.3996.
struct TimestepSamplerConfig {
  double cutoff = 0.999;  // s
  double beta_a = 1.5;
  double beta_b = 1.0;    // inverse-CDF form requires b == 1
};

double timestep_from_uniform(double u, const TimestepSamplerConfig& cfg = {});
double sample_timestep(Rng& rng, const TimestepSamplerConfig& cfg = {});

// Squared L2 norm of the prediction residual (sum of squares over the chunk).
Tensor fm_residual_loss(const Tensor& v_hat, const Tensor& v_gt);

struct InferenceConfig {
  int steps = 8;  // K; the Euler step is exactly 1/K
};

// Velocity field queried during integration; must return a tensor shaped
// like the chunk.
using VelocityFn = std::function<Tensor(const Tensor& a_tau, double tau)>;

// Forward Euler from a standard-normal chunk: K steps of size 1/K starting
// at tau = 0, landing exactly on tau = 1.
Tensor integrate_euler(const VelocityFn& velocity, const Shape& chunk_shape,
                       const InferenceConfig& cfg, Rng& rng);

// Convenience wrapper evaluating the policy without recording gradients.
Tensor integrate_euler(const PolicyNet& net, const ParamSet& params,
                       const SemanticFeatures& features, const Tensor& robot_state,
                       const InferenceConfig& cfg, Rng& rng);

}  // namespace actflow
