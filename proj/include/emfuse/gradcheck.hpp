#pragma once

// Central-difference gradient verification for scalar-valued functions of a
// single tensor argument. The finite-difference probe never touches the tape,
// so it stays an independent oracle for the registered adjoints.

#include "emfuse/tensor.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace emfuse {

struct GradcheckResult {
    double max_error = 0.0;
    std::int64_t worst_index = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

// max_i |analytic_i - numeric_i| / max(1, |analytic_i|) with central
// differences of step h. `f` must build a fresh graph on every call.
inline GradcheckResult gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor probe = Tensor::from(x.shape(), x.values());
    probe.set_requires_grad(true);
    Tensor loss = f(probe);
    if (loss.numel() != 1) throw std::invalid_argument("gradcheck: f must return a scalar");
    backward(loss);
    const std::vector<double> analytic = probe.grad();

    GradcheckResult res;
    std::vector<double> base = x.values();
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> bumped = base;
        bumped[i] = base[i] + h;
        const double up = f(Tensor::from(x.shape(), bumped)).item();
        bumped[i] = base[i] - h;
        const double down = f(Tensor::from(x.shape(), bumped)).item();
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::runtime_error("gradcheck: non-finite function value at coordinate " + std::to_string(i));
        }
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (err > res.max_error) {
            res.max_error = err;
            res.worst_index = static_cast<std::int64_t>(i);
            res.analytic_at_worst = analytic[i];
            res.numeric_at_worst = numeric;
        }
    }
    return res;
}

// Variant for a parameter embedded in a larger model: `loss_fn` re-runs the
// forward pass reading `param` by reference, and the analytic gradient is
// taken from `param.grad()` after backward. Coordinates of `param` are bumped
// in place for the numeric side and restored afterwards. With max_coords > 0
// a deterministic stride keeps at most that many coordinates per parameter.
inline GradcheckResult gradcheck_inplace(const std::function<Tensor()>& loss_fn, Tensor param, double h = 1e-5,
                                         std::size_t max_coords = 0) {
    if (!param.requires_grad()) throw std::invalid_argument("gradcheck_inplace: param must require grad");
    param.zero_grad();
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw std::invalid_argument("gradcheck_inplace: loss_fn must return a scalar");
    backward(loss);
    const std::vector<double> analytic = param.grad();

    std::size_t stride = 1;
    if (max_coords > 0 && analytic.size() > max_coords) {
        stride = (analytic.size() + max_coords - 1) / max_coords;
    }
    GradcheckResult res;
    double* data = param.data();
    for (std::size_t i = 0; i < analytic.size(); i += stride) {
        const double saved = data[i];
        data[i] = saved + h;
        const double up = loss_fn().item();
        data[i] = saved - h;
        const double down = loss_fn().item();
        data[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::runtime_error("gradcheck_inplace: non-finite loss at coordinate " + std::to_string(i));
        }
        const double numeric = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        if (err > res.max_error) {
            res.max_error = err;
            res.worst_index = static_cast<std::int64_t>(i);
            res.analytic_at_worst = analytic[i];
            res.numeric_at_worst = numeric;
        }
    }
    return res;
}

}  // namespace emfuse
