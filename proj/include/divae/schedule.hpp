#pragma once

#include <string>
#include <vector>

#include "divae/tensor.hpp"

namespace divae {

enum class ScheduleKind { linear, cosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

// Precomputed diffusion-time quantities. Timesteps are 1-indexed in the public
// API (t in [1, T]); index t-1 into the arrays. alpha_bar at the virtual t=0
// is defined as 1, which makes the t=1 posterior variance exactly 0; its
// log entry is clipped to the t=2 value so it stays finite.
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::linear;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> alpha_bars_prev;  // alpha_bar_{t-1}, entry 0 is 1
    std::vector<double> posterior_betas;
    std::vector<double> posterior_log_betas_clipped;

    double beta(int t) const { return betas[check(t)]; }
    double alpha(int t) const { return alphas[idx(t)]; }
    double alpha_bar(int t) const { return alpha_bars[idx(t)]; }
    double alpha_bar_prev(int t) const { return alpha_bars_prev[idx(t)]; }
    double posterior_beta(int t) const { return posterior_betas[idx(t)]; }
    double posterior_log_beta_clipped(int t) const { return posterior_log_betas_clipped[idx(t)]; }

    size_t check(int t) const;
    size_t idx(int t) const { return check(t); }
};

// kind=linear interpolates beta from 1e-4 to 0.02; kind=cosine uses the
// squared-cosine alpha_bar curve with offset 0.008 and betas clipped to 0.999.
NoiseSchedule make_schedule(int T, ScheduleKind kind);
NoiseSchedule make_schedule(int T, const std::string& kind);

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
// batched variant: ts holds one timestep per leading-dim sample
Tensor q_sample(const Tensor& x0, const std::vector<int>& ts, const Tensor& eps,
                const NoiseSchedule& sched);

struct PosteriorParams {
    Tensor mean;
    double variance = 0.0;
};

// q(x_{t-1} | x_t, x_0): mean and variance of the true reverse conditional
PosteriorParams posterior_params(const Tensor& x0, const Tensor& xt, int t,
                                 const NoiseSchedule& sched);

}  // namespace divae
