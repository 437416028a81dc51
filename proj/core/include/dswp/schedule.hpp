#pragma once

#include <vector>

#include "dswp/tensor.hpp"

namespace dswp {

/// Variance schedule tables for T timesteps. beta/alpha/alpha_bar are indexed
/// 1..T through the accessors; alpha_bar(0) == 1 by convention. Tables are
/// computed and stored in double so derived coefficients keep full precision;
/// tensors stay 32-bit.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] is beta_t
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // prod_{i<=t} alpha_i

  double beta_at(int t) const;
  double alpha_at(int t) const;
  double alpha_bar_at(int t) const;  // t in [0, T]
  void check_timestep(int t, const char* op) const;
};

enum class ScheduleKind { Linear };

NoiseSchedule make_schedule(int T, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::Linear);

/// sqrt(abar_t) z0 + sqrt(1-abar_t) noise. t in [0,T]; t=0 returns z0's value.
Tensor forward_sample(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& noise);

/// (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t): the clean-latent estimate.
/// Differentiable through both z_t and eps.
Tensor estimate_z0(const NoiseSchedule& s, const Tensor& z_t, const Tensor& eps, int t);

/// DDIM variance for the jump t_cur -> t_prev at stochasticity eta.
double ddim_sigma(const NoiseSchedule& s, int t_cur, int t_prev, double eta);

/// sqrt(abar_prev) z_hat + sqrt(1-abar_prev-sigma^2) eps + sigma noise.
/// noise may be undefined when eta == 0.
Tensor ddim_step(const NoiseSchedule& s, const Tensor& z_hat, const Tensor& eps, int t_cur,
                 int t_prev, double eta, const Tensor& noise);

/// Contiguous step t -> t-1 (the common case).
Tensor ddim_step(const NoiseSchedule& s, const Tensor& z_hat, const Tensor& eps, int t, double eta,
                 const Tensor& noise);

/// Evenly strided timestep subsequence k, k-stride, ..., stride (descending);
/// the sampler appends the final jump to 0. Requires stride | k.
std::vector<int> strided_timesteps(int k, int stride);

}  // namespace dswp
