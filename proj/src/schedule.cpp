#include "dpopt/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dpopt/rng.hpp"

namespace dpopt::diffusion {

namespace {

void check_t(const char* op, int t, const NoiseSchedule& sched, int lo = 0) {
    if (t < lo || t >= sched.train_steps)
        throw std::invalid_argument(std::string(op) + ": timestep " + std::to_string(t) +
                                    " outside [" + std::to_string(lo) + ", " +
                                    std::to_string(sched.train_steps) + ")");
}

}  // namespace

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t == kFinalStep) return 1.0;
    return alpha_bars.at(static_cast<std::size_t>(t));
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, int infer_steps) {
    if (T < 1 || infer_steps < 1 || T < infer_steps)
        throw std::invalid_argument("make_schedule: need T >= infer_steps >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.train_steps = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }

    s.infer_steps = infer_steps;
    s.infer_index.resize(infer_steps);
    if (infer_steps == 1) {
        s.infer_index[0] = 0;
    } else {
        for (int p = 0; p < infer_steps; ++p) {
            const double frac = static_cast<double>(infer_steps - 1 - p) / (infer_steps - 1);
            s.infer_index[p] = static_cast<int>(std::lround(frac * (T - 1)));
        }
    }
    return s;
}

ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& sched) {
    check_t("q_sample", t, sched);
    if (eps.shape != x0.shape)
        throw std::invalid_argument("q_sample: eps shape " + ad::shape_str(eps.shape) +
                                    " != x0 shape " + ad::shape_str(x0.shape));
    const double ab = sched.alpha_bars[t];
    return ad::add(ad::scale(x0, std::sqrt(ab)), ad::scale(eps, std::sqrt(1.0 - ab)));
}

ad::Tensor forward_step(const ad::Tensor& x_prev, int t, const ad::Tensor& noise,
                        const NoiseSchedule& sched) {
    check_t("forward_step", t, sched);
    const double b = sched.betas[t];
    return ad::add(ad::scale(x_prev, std::sqrt(1.0 - b)), ad::scale(noise, std::sqrt(b)));
}

ad::Tensor cfg_epsilon(const ad::Tensor& eps_cond, const ad::Tensor& eps_uncond, double w) {
    if (eps_cond.shape != eps_uncond.shape)
        throw std::invalid_argument("cfg_epsilon: branch shapes differ");
    return ad::add(ad::scale(eps_cond, 1.0 + w), ad::scale(eps_uncond, -w));
}

ad::Tensor estimate_x0(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t,
                       const NoiseSchedule& sched) {
    check_t("estimate_x0", t, sched);
    const double ab = sched.alpha_bars[t];
    auto num = ad::sub(x_t, ad::scale(eps_hat, std::sqrt(1.0 - ab)));
    return ad::scale(num, 1.0 / std::sqrt(ab));
}

ad::Tensor posterior_mean(const ad::Tensor& x_t, const ad::Tensor& x0, int t,
                          const NoiseSchedule& sched) {
    check_t("posterior_mean", t, sched, /*lo=*/1);
    const double ab_t = sched.alpha_bars[t];
    const double ab_prev = sched.alpha_bars[t - 1];
    const double beta_t = sched.betas[t];
    const double alpha_t = sched.alphas[t];
    const double c0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
    const double ct = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
    return ad::add(ad::scale(x0, c0), ad::scale(x_t, ct));
}

ad::Tensor ddpm_mu(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t,
                   const NoiseSchedule& sched) {
    check_t("ddpm_mu", t, sched, /*lo=*/1);
    const double ab_t = sched.alpha_bars[t];
    const double beta_t = sched.betas[t];
    const double alpha_t = sched.alphas[t];
    auto num = ad::sub(x_t, ad::scale(eps_hat, beta_t / std::sqrt(1.0 - ab_t)));
    return ad::scale(num, 1.0 / std::sqrt(alpha_t));
}

ad::Tensor ddim_step(const ad::Tensor& x_t, const ad::Tensor& eps_hat, int t, int t_prev,
                     const NoiseSchedule& sched) {
    check_t("ddim_step", t, sched);
    if (t_prev != kFinalStep) {
        check_t("ddim_step", t_prev, sched);
        if (t_prev >= t)
            throw std::invalid_argument("ddim_step: step pair must decrease, got t=" +
                                        std::to_string(t) + " t_prev=" + std::to_string(t_prev));
    }
    const double ab_prev = sched.alpha_bar_at(t_prev);
    auto x0_hat = estimate_x0(x_t, eps_hat, t, sched);
    return ad::add(ad::scale(x0_hat, std::sqrt(ab_prev)),
                   ad::scale(eps_hat, std::sqrt(1.0 - ab_prev)));
}

ad::Tensor guided_epsilon(const DenoiserFn& denoiser, const ad::Tensor& x_t, int t,
                          const ad::Tensor& cond, const ad::Tensor& neg_cond, double w) {
    auto eps_cond = denoiser(x_t, t, cond);
    auto eps_uncond = denoiser(x_t, t, neg_cond);
    auto out = cfg_epsilon(eps_cond, eps_uncond, w);
    if (out.requires_grad && ad::Tape::current() != nullptr)
        ad::Tape::current()->guided_denoiser_calls += 1;
    return out;
}

ad::Tensor sample(const DenoiserFn& denoiser, const ad::Tensor& cond, const ad::Tensor& neg_cond,
                  double w, const NoiseSchedule& sched, const ad::Shape& image_shape,
                  std::uint64_t rng_seed) {
    ad::NoGradGuard no_grad;
    rng::Stream rs(rng_seed);
    std::vector<double> init(static_cast<std::size_t>(ad::numel_of(image_shape)));
    for (auto& v : init) v = rs.normal();
    auto x = ad::Tensor::from_vector(image_shape, std::move(init));

    auto cond_d = ad::detach(cond);
    auto neg_d = ad::detach(neg_cond);
    const int n = sched.infer_steps;
    for (int p = 0; p < n; ++p) {
        const int t = sched.infer_index[p];
        const int t_prev = (p + 1 < n) ? sched.infer_index[p + 1] : kFinalStep;
        auto eps = guided_epsilon(denoiser, x, t, cond_d, neg_d, w);
        x = ddim_step(x, eps, t, t_prev, sched);
    }
    return x;
}

}  // namespace dpopt::diffusion
