#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "fdm/error.hpp"

namespace fdm::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. `grad` is either empty (no gradient) or the same
// length as `data`.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(nn::numel(shape), fill) {
        check_shape();
    }

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        check_shape();
        if (nn::numel(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
        }
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    bool has_grad() const { return !grad.empty(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool all_finite() const {
        for (const T& v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape == b.shape && a.data == b.data;
    }

private:
    void check_shape() const {
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape));
        }
    }
};

// Parameters keyed by dotted path. std::map keeps iteration lexicographic.
template <class T>
using ParamTree = std::map<std::string, Tensor<T>>;

template <class U, class T>
ParamTree<U> cast_tree(const ParamTree<T>& in) {
    ParamTree<U> out;
    for (const auto& [k, v] : in) out.emplace(k, v.template cast<U>());
    return out;
}

template <class T>
std::size_t parameter_count(const ParamTree<T>& p) {
    std::size_t n = 0;
    for (const auto& [k, v] : p) n += v.numel();
    return n;
}

} // namespace fdm::nn
