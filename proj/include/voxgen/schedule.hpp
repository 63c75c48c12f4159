#pragma once

#include <string>
#include <vector>

#include "voxgen/tensor.hpp"

namespace voxgen {

// Forward/reverse process tables. Timesteps are 1-based: t in [1, T],
// betas[t-1] is the step-t variance and alpha_bars[t-1] the cumulative
// product up to t.
struct DiffusionSchedule {
    int T = 0;
    std::string kind;  // "linear" or "scaled_linear"
    std::vector<double> betas;
    std::vector<double> alphas;      // 1 - beta
    std::vector<double> alpha_bars;  // cumprod(alphas)

    double alpha_bar(int t) const { return alpha_bars[std::size_t(t - 1)]; }
    double beta(int t) const { return betas[std::size_t(t - 1)]; }
    double alpha(int t) const { return alphas[std::size_t(t - 1)]; }
    // alpha_bar at t-1 with the t=0 convention alpha_bar_0 = 1
    double alpha_bar_prev(int t) const { return t > 1 ? alpha_bars[std::size_t(t - 2)] : 1.0; }
    // DDPM posterior variance beta-tilde_t
    double posterior_var(int t) const {
        return (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t)) * beta(t);
    }
};

// "linear" interpolates beta directly; "scaled_linear" interpolates sqrt(beta)
// and squares it.
DiffusionSchedule make_schedule(int T, double beta_start, double beta_end,
                                const std::string& kind);

// x_t = sqrt(abar)*x0 + sqrt(1-abar)*eps. The coefficient form is exposed so
// degenerate abar values (0, 1) can be exercised directly.
Tensor forward_diffuse_coef(const Tensor& x0, double alpha_bar, const Tensor& eps);
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched);

// v = sqrt(abar)*eps - sqrt(1-abar)*x0
Tensor velocity_target_coef(const Tensor& x0, const Tensor& eps, double alpha_bar);
Tensor velocity_target(const Tensor& x0, const Tensor& eps, int t, const DiffusionSchedule& sched);

// x0 = sqrt(abar)*x_t - sqrt(1-abar)*v (inverse of the pair above)
Tensor recover_x0_coef(const Tensor& x_t, const Tensor& v, double alpha_bar);
Tensor recover_x0(const Tensor& x_t, const Tensor& v, int t, const DiffusionSchedule& sched);

// eps implied by (x_t, v): eps = sqrt(1-abar)*x_t + sqrt(abar)*v
Tensor eps_from_velocity(const Tensor& x_t, const Tensor& v, int t,
                         const DiffusionSchedule& sched);

}  // namespace voxgen
