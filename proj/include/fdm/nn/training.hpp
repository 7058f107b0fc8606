#pragma once

#include <cstdlib>
#include <string>
#include <vector>

#include "fdm/error.hpp"
#include "fdm/nn/tensor.hpp"

namespace fdm::nn {

// Raised when a loss or gradient goes non-finite mid-training. Carries the
// parameters as they were at the end of the last finite epoch.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, ParamTree<float> last_good, std::size_t epoch)
        : DivergenceError(what), last_good_(std::move(last_good)), epoch_(epoch) {}

    const ParamTree<float>& last_good() const { return last_good_; }
    std::size_t epoch() const { return epoch_; }

private:
    ParamTree<float> last_good_;
    std::size_t epoch_;
};

// Worker count from FDM_THREADS, default 1.
inline std::size_t worker_threads() {
    const char* env = std::getenv("FDM_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw Error("FDM_THREADS must be a positive integer, got \"" + std::string(env) + "\"");
    return static_cast<std::size_t>(v);
}

// Shuffled index order for one epoch (Fisher-Yates).
template <class Rng>
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    return idx;
}

} // namespace fdm::nn
