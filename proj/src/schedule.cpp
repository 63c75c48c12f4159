#include "voxgen/schedule.hpp"

#include <cmath>

namespace voxgen {

DiffusionSchedule make_schedule(int T, double beta_start, double beta_end,
                                const std::string& kind) {
    if (T < 1) throw ArgumentError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ArgumentError("make_schedule: need 0 < beta_start <= beta_end < 1, got (" +
                            std::to_string(beta_start) + ", " + std::to_string(beta_end) + ")");
    if (kind != "linear" && kind != "scaled_linear")
        throw ArgumentError("make_schedule: kind must be 'linear' or 'scaled_linear', got '" +
                            kind + "'");
    DiffusionSchedule s;
    s.T = T;
    s.kind = kind;
    s.betas.resize(std::size_t(T));
    for (int i = 0; i < T; ++i) {
        const double u = T == 1 ? 0.0 : double(i) / double(T - 1);
        if (kind == "linear") {
            s.betas[std::size_t(i)] = beta_start + (beta_end - beta_start) * u;
        } else {
            const double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * u;
            s.betas[std::size_t(i)] = r * r;
        }
    }
    s.alphas.resize(std::size_t(T));
    s.alpha_bars.resize(std::size_t(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alphas[std::size_t(i)] = 1.0 - s.betas[std::size_t(i)];
        prod *= s.alphas[std::size_t(i)];
        s.alpha_bars[std::size_t(i)] = prod;
    }
    return s;
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw ArgumentError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " +
                            b.shape_str());
}

static void check_t(int t, const DiffusionSchedule& sched, const char* who) {
    if (t < 1 || t > sched.T)
        throw ArgumentError(std::string(who) + ": t=" + std::to_string(t) +
                            " outside [1, " + std::to_string(sched.T) + "]");
}

Tensor forward_diffuse_coef(const Tensor& x0, double alpha_bar, const Tensor& eps) {
    check_same_shape(x0, eps, "forward_diffuse");
    const float a = float(std::sqrt(alpha_bar));
    const float b = float(std::sqrt(1.0 - alpha_bar));
    Tensor out(x0.shape);
    for (i64 i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps,
                       const DiffusionSchedule& sched) {
    check_t(t, sched, "forward_diffuse");
    return forward_diffuse_coef(x0, sched.alpha_bar(t), eps);
}

Tensor velocity_target_coef(const Tensor& x0, const Tensor& eps, double alpha_bar) {
    check_same_shape(x0, eps, "velocity_target");
    const float a = float(std::sqrt(alpha_bar));
    const float b = float(std::sqrt(1.0 - alpha_bar));
    Tensor out(x0.shape);
    for (i64 i = 0; i < out.numel(); ++i) out[i] = a * eps[i] - b * x0[i];
    return out;
}

Tensor velocity_target(const Tensor& x0, const Tensor& eps, int t,
                       const DiffusionSchedule& sched) {
    check_t(t, sched, "velocity_target");
    return velocity_target_coef(x0, eps, sched.alpha_bar(t));
}

Tensor recover_x0_coef(const Tensor& x_t, const Tensor& v, double alpha_bar) {
    check_same_shape(x_t, v, "recover_x0");
    const float a = float(std::sqrt(alpha_bar));
    const float b = float(std::sqrt(1.0 - alpha_bar));
    Tensor out(x_t.shape);
    for (i64 i = 0; i < out.numel(); ++i) out[i] = a * x_t[i] - b * v[i];
    return out;
}

Tensor recover_x0(const Tensor& x_t, const Tensor& v, int t, const DiffusionSchedule& sched) {
    check_t(t, sched, "recover_x0");
    return recover_x0_coef(x_t, v, sched.alpha_bar(t));
}

Tensor eps_from_velocity(const Tensor& x_t, const Tensor& v, int t,
                         const DiffusionSchedule& sched) {
    check_t(t, sched, "eps_from_velocity");
    check_same_shape(x_t, v, "eps_from_velocity");
    const float a = float(std::sqrt(sched.alpha_bar(t)));
    const float b = float(std::sqrt(1.0 - sched.alpha_bar(t)));
    Tensor out(x_t.shape);
    for (i64 i = 0; i < out.numel(); ++i) out[i] = b * x_t[i] + a * v[i];
    return out;
}

}  // namespace voxgen
