#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fdm/nn/tensor.hpp"

namespace fdm::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::uint64_t t = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;

    explicit AdamState(AdamConfig c = {}) : cfg(c) {}
};

namespace detail {

template <class A, class B>
void require_same_structure(const std::map<std::string, A>& a, const std::map<std::string, B>& b,
                            const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string("adam_step: ") + what + " has " + std::to_string(b.size()) +
                         " entries, parameters have " + std::to_string(a.size()));
    }
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first) {
            throw ShapeError(std::string("adam_step: ") + what + " entry \"" + ib->first +
                             "\" does not match parameter \"" + ia->first + "\"");
        }
    }
}

} // namespace detail

// One bias-corrected Adam update. Moments are kept in double.
template <class T>
void adam_step(ParamTree<T>& params, const ParamTree<T>& grads, AdamState& state) {
    detail::require_same_structure(params, grads, "gradient tree");
    if (state.m.empty()) {
        for (const auto& [path, p] : params) {
            state.m.emplace(path, std::vector<double>(p.numel(), 0.0));
            state.v.emplace(path, std::vector<double>(p.numel(), 0.0));
        }
    }
    detail::require_same_structure(params, state.m, "first-moment buffer");
    detail::require_same_structure(params, state.v, "second-moment buffer");
    state.t += 1;
    const AdamConfig& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
    for (auto& [path, p] : params) {
        const Tensor<T>& g = grads.at(path);
        if (g.shape != p.shape) {
            throw ShapeError("adam_step: gradient for \"" + path + "\" has shape " + to_string(g.shape) +
                             ", parameter has " + to_string(p.shape));
        }
        auto& m = state.m.at(path);
        auto& v = state.v.at(path);
        if (m.size() != p.numel() || v.size() != p.numel()) {
            throw ShapeError("adam_step: moment buffer size mismatch for \"" + path + "\"");
        }
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] = static_cast<T>(static_cast<double>(p[i]) - c.lr * mh / (std::sqrt(vh) + c.eps));
        }
    }
}

} // namespace fdm::nn
