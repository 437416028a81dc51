#include "dswp/schedule.hpp"

#include <cmath>

namespace dswp {

double NoiseSchedule::beta_at(int t) const {
  check_timestep(t, "beta_at");
  return beta[t - 1];
}

double NoiseSchedule::alpha_at(int t) const {
  check_timestep(t, "alpha_at");
  return alpha[t - 1];
}

double NoiseSchedule::alpha_bar_at(int t) const {
  require(t >= 0 && t <= T, "alpha_bar_at: timestep ", t, " out of range [0,", T, "]");
  return t == 0 ? 1.0 : alpha_bar[t - 1];
}

void NoiseSchedule::check_timestep(int t, const char* op) const {
  require(t >= 1 && t <= T, op, ": timestep ", t, " out of range [1,", T, "]");
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  require(T >= 1, "make_schedule: T must be >= 1, got ", T);
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1, got ", beta_start, " and ",
          beta_end);
  require(kind == ScheduleKind::Linear, "make_schedule: unknown schedule kind");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor forward_sample(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& noise) {
  require(t >= 0 && t <= s.T, "forward_sample: timestep ", t, " out of range [0,", s.T, "]");
  require(noise.defined() && noise.shape() == z0.shape(),
          "forward_sample: noise shape does not match z0");
  double ab = s.alpha_bar_at(t);
  return axpby(std::sqrt(ab), z0, std::sqrt(1.0 - ab), noise);
}

Tensor estimate_z0(const NoiseSchedule& s, const Tensor& z_t, const Tensor& eps, int t) {
  s.check_timestep(t, "estimate_z0");
  require(eps.shape() == z_t.shape(), "estimate_z0: eps shape does not match z_t");
  double ab = s.alpha_bar_at(t);
  double inv = 1.0 / std::sqrt(ab);
  return axpby(inv, z_t, -std::sqrt(1.0 - ab) * inv, eps);
}

double ddim_sigma(const NoiseSchedule& s, int t_cur, int t_prev, double eta) {
  s.check_timestep(t_cur, "ddim_sigma");
  require(t_prev >= 0 && t_prev < t_cur, "ddim_sigma: need 0 <= t_prev < t_cur, got ", t_prev,
          " and ", t_cur);
  require(eta >= 0.0 && eta <= 1.0, "ddim_sigma: eta must be in [0,1], got ", eta);
  double ab_cur = s.alpha_bar_at(t_cur);
  double ab_prev = s.alpha_bar_at(t_prev);
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) * std::sqrt(1.0 - ab_cur / ab_prev);
}

Tensor ddim_step(const NoiseSchedule& s, const Tensor& z_hat, const Tensor& eps, int t_cur,
                 int t_prev, double eta, const Tensor& noise) {
  require(eps.shape() == z_hat.shape(), "ddim_step: eps shape does not match z_hat");
  double sigma = ddim_sigma(s, t_cur, t_prev, eta);
  double ab_prev = s.alpha_bar_at(t_prev);
  double rad = 1.0 - ab_prev - sigma * sigma;
  // Slight negative values can only come from rounding at the t_prev=0,
  // eta=1 corner; anything materially negative is an invariant violation.
  require(rad > -1e-12, "ddim_step: negative direction radicand ", rad, " at t=", t_cur);
  if (rad < 0.0) rad = 0.0;
  Tensor mean = axpby(std::sqrt(ab_prev), z_hat, std::sqrt(rad), eps);
  if (sigma == 0.0) return mean;
  require(noise.defined() && noise.shape() == z_hat.shape(),
          "ddim_step: stochastic step needs noise of z_hat's shape");
  return axpby(1.0, mean, sigma, noise);
}

Tensor ddim_step(const NoiseSchedule& s, const Tensor& z_hat, const Tensor& eps, int t, double eta,
                 const Tensor& noise) {
  return ddim_step(s, z_hat, eps, t, t - 1, eta, noise);
}

std::vector<int> strided_timesteps(int k, int stride) {
  require(k >= 1, "strided_timesteps: k must be >= 1, got ", k);
  require(stride >= 1 && k % stride == 0, "strided_timesteps: stride ", stride,
          " must divide k=", k, " evenly");
  std::vector<int> ts;
  for (int t = k; t >= stride; t -= stride) ts.push_back(t);
  return ts;
}

}  // namespace dswp
