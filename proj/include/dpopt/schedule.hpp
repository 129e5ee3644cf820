#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dpopt/tensor.hpp"

namespace dpopt::diffusion {

// t_prev sentinel for the last DDIM step: alpha_bar treated as exactly 1, so
// the update returns the x0 estimate.
inline constexpr int kFinalStep = -1;

struct NoiseSchedule {
    int train_steps = 0;  // T
    std::vector<double> betas;
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod alphas[0..t]
    int infer_steps = 0;
    std::vector<int> infer_index;  // strictly decreasing, ends at timestep 0

    double alpha_bar_at(int t) const;  // t == kFinalStep -> 1.0
};

struct GuidanceConfig {
    double w = 7.5;
    ad::Tensor negative_conditioning;  // replaces the empty-string branch
};

// Linear beta interpolation between beta_start and beta_end over T steps,
// with an evenly spaced decreasing inference index.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end, int infer_steps);

// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps  (one-step forward jump)
ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& sched);

// sqrt(1 - beta_t) x_prev + sqrt(beta_t) noise  (single forward step)
ad::Tensor forward_step(const ad::Tensor& x_prev, int t, const ad::Tensor& noise,
                        const NoiseSchedule& sched);

// (1 + w) eps_cond - w eps_uncond
ad::Tensor cfg_epsilon(const ad::Tensor& eps_cond, const ad::Tensor& eps_uncond, double w);

// (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t); differentiable through both inputs.
ad::Tensor estimate_x0(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t,
                       const NoiseSchedule& sched);

// Posterior mean of q(x_{t-1} | x_t, x0); requires t >= 1.
ad::Tensor posterior_mean(const ad::Tensor& x_t, const ad::Tensor& x0, int t,
                          const NoiseSchedule& sched);

// Epsilon parameterization of the same mean: (x_t - beta_t/sqrt(1-ab_t) eps_hat) / sqrt(alpha_t).
ad::Tensor ddpm_mu(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t,
                   const NoiseSchedule& sched);

// Deterministic DDIM update (sigma = 0):
//   sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps_hat
ad::Tensor ddim_step(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t, int t_prev,
                     const NoiseSchedule& sched);

using DenoiserFn =
    std::function<ad::Tensor(const ad::Tensor& x_t, int t, const ad::Tensor& cond)>;

// Conditional/unconditional pair combined per the guidance scale. Bumps the
// active tape's guided-call counter when the result joins the graph.
ad::Tensor guided_epsilon(const DenoiserFn& denoiser, const ad::Tensor& x_t, int t,
                          const ad::Tensor& cond, const ad::Tensor& neg_cond, double w);

// Full detached sampling loop from seeded Gaussian noise down to the image.
// Deterministic in (weights, cond, neg_cond, w, seed); never grows the tape.
ad::Tensor sample(const DenoiserFn& denoiser, const ad::Tensor& cond, const ad::Tensor& neg_cond,
                  double w, const NoiseSchedule& sched, const ad::Shape& image_shape,
                  std::uint64_t rng_seed);

}  // namespace dpopt::diffusion
