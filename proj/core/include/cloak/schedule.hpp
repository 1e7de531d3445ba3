#pragma once

#include <span>
#include <vector>

#include "cloak/autograd.hpp"
#include "cloak/denoiser.hpp"

namespace cloak {

constexpr int kDefaultTimesteps = 1000;
constexpr double kDefaultBetaStart = 1e-4;
constexpr double kDefaultBetaEnd = 0.02;

// Index t is zero-based: alpha_bars[0] = alphas[0].
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    void check_timestep(int t) const;
};

NoiseSchedule build_linear_schedule(int T = kDefaultTimesteps, double beta_start = kDefaultBetaStart,
                                    double beta_end = kDefaultBetaEnd);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps. No clipping.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// Differentiable in x0. `timesteps` is one per sample or a single shared value.
ag::Var q_sample(const ag::Var& x0, std::span<const int> timesteps, const Tensor& eps, const NoiseSchedule& schedule);

// Mean over batch and elements of (eps - eps_theta(x_t, t, prompt))^2.
ag::Var cond_loss(const Denoiser& model, const ag::Var& x0, const ag::Var& prompt, std::span<const int> timesteps,
                  const Tensor& eps, const NoiseSchedule& schedule);
ag::Var cond_loss(const Denoiser& model, const ag::Var& x0, const ag::Var& prompt, int t, const Tensor& eps,
                  const NoiseSchedule& schedule);

}  // namespace cloak
