#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rcbev/tensor.hpp"

namespace rcbev {

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                   double eps = 1e-5) {
    Tensor g(x.shape());
    Tensor xp = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        xp[i] = v + eps;
        const double fp = f(xp);
        xp[i] = v - eps;
        const double fm = f(xp);
        xp[i] = v;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_parameter_errors;

    void merge(const std::string& name, double err) {
        per_parameter_errors.emplace_back(name, err);
        max_rel_error = std::max(max_rel_error, err);
    }
};

/// Relative error with a per-tensor scale floor and an absolute tolerance at
/// the resolution of central differences themselves (~1e-10 for O(1) losses
/// at eps = 1e-5). Without the absolute floor, structurally-zero gradients
/// (e.g. attention key biases, which cancel under softmax shift invariance)
/// would divide FD roundoff noise by itself.
inline double rel_error(const Tensor& analytic, const Tensor& fd, double abs_tol = 1e-9) {
    double gmax = 0.0;
    for (int64_t i = 0; i < analytic.size(); ++i) gmax = std::max(gmax, std::abs(analytic[i]));
    double worst = 0.0;
    for (int64_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], f = fd[i];
        if (std::abs(a - f) < abs_tol) continue;
        const double denom = std::max({std::abs(a), std::abs(f), 1e-3 * gmax, 1e-8});
        worst = std::max(worst, std::abs(a - f) / denom);
    }
    return worst;
}

/// Compares analytic gradients already accumulated in each Param::grad against
/// central differences of `loss_fn` (which must re-evaluate the loss from the
/// current parameter values).
inline GradCheckReport check_param_gradients(const std::vector<NamedParam>& params,
                                             const std::function<double()>& loss_fn,
                                             double eps = 1e-5) {
    GradCheckReport report;
    // Central differences cannot resolve below ~machine_eps * |L| / eps.
    const double noise_floor = 1e-9 * std::max(1.0, std::abs(loss_fn()));
    for (const auto& np : params) {
        Tensor& v = np.p->value;
        Tensor fd(v.shape());
        for (int64_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + eps;
            const double lp = loss_fn();
            v[i] = keep - eps;
            const double lm = loss_fn();
            v[i] = keep;
            fd[i] = (lp - lm) / (2.0 * eps);
        }
        report.merge(np.name, rel_error(np.p->grad, fd, noise_floor));
    }
    return report;
}

/// Same check for the gradient of the loss with respect to an input tensor.
inline double check_input_gradient(Tensor& x, const Tensor& analytic_dx,
                                   const std::function<double()>& loss_fn, double eps = 1e-5) {
    const double noise_floor = 1e-9 * std::max(1.0, std::abs(loss_fn()));
    Tensor fd(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        const double lp = loss_fn();
        x[i] = keep - eps;
        const double lm = loss_fn();
        x[i] = keep;
        fd[i] = (lp - lm) / (2.0 * eps);
    }
    return rel_error(analytic_dx, fd, noise_floor);
}

}  // namespace rcbev
