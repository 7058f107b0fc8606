#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fdm/nn/autograd.hpp"
#include "fdm/nn/rng.hpp"

namespace fdm::test {

using nn::Tape;
using nn::Tensor;
using nn::Var;

using LossFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double worst_rel = 0.0;
    std::string where;
    std::size_t checked = 0;
};

inline double loss_value(const LossFn& f, const std::vector<Tensor<double>>& inputs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    return f(tape, vars).value()[0];
}

// Central differences with step h against the tape gradient. Relative error
// is |a - n| / max(|a|, |n|, floor). `max_per_input` limits the number of
// probed elements per input (0 = all), picked with a fixed stride.
inline GradCheckResult grad_check(const LossFn& f, std::vector<Tensor<double>> inputs, double h = 1e-3,
                                  std::size_t max_per_input = 0, double floor = 1e-2) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(f(tape, vars));
    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::vector<double> analytic = tape.grad(vars[k]);
        const std::size_t n = inputs[k].numel();
        const std::size_t stride = (max_per_input == 0 || n <= max_per_input) ? 1 : n / max_per_input;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double up = loss_value(f, inputs);
            inputs[k][i] = orig - h;
            const double down = loss_value(f, inputs);
            inputs[k][i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            ++res.checked;
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.where = "input " + std::to_string(k) + " element " + std::to_string(i) + ": analytic " +
                            std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return res;
}

inline Tensor<double> random_tensor(nn::RngStream& r, nn::Shape shape, double scale = 1.0) {
    Tensor<double> t = nn::rng_gaussian<double>(r, shape);
    for (double& v : t.data) v *= scale;
    return t;
}

inline Tensor<double> uniform_tensor(nn::RngStream& r, nn::Shape shape, double lo, double hi) {
    Tensor<double> t(shape);
    for (double& v : t.data) v = r.uniform(lo, hi);
    return t;
}

} // namespace fdm::test
