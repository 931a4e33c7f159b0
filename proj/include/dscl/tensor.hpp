#pragma once

#include <cmath>
#include <cstring>
#include <memory>

#include "dscl/common.hpp"

namespace dscl {

/// Shared backing store for a tensor. All shallow copies of a Tensor point at
/// the same Storage, so a gradient buffer allocated through one copy is
/// visible to every other copy (backward closures rely on this).
template <typename T>
struct Storage {
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad(); same length as data after
};

/// N-dimensional array handle. Copies are shallow; ops treat produced tensors
/// as immutable values. Layout is contiguous row-major: N×C×H×W for
/// activations, Cout×Cin×Kh×Kw for conv weights, Out×In for linear weights.
template <typename T>
struct Tensor {
    Dims dims;
    std::shared_ptr<Storage<T>> st;
    bool requires_grad = false;
    int64_t tape_serial = -1;  // set when produced by an op recorded on a tape

    Tensor() = default;

    static Tensor zeros(Dims d) {
        Tensor t;
        t.dims = std::move(d);
        t.st = std::make_shared<Storage<T>>();
        t.st->data.assign(static_cast<size_t>(numel_of(t.dims)), T(0));
        return t;
    }
    static Tensor full(Dims d, T value) {
        Tensor t = zeros(std::move(d));
        std::fill(t.st->data.begin(), t.st->data.end(), value);
        return t;
    }
    static Tensor from(Dims d, std::vector<T> values) {
        if (numel_of(d) != static_cast<int64_t>(values.size()))
            throw ShapeError("Tensor::from: " + dims_str(d) + " needs " +
                             std::to_string(numel_of(d)) + " values, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.dims = std::move(d);
        t.st = std::make_shared<Storage<T>>();
        t.st->data = std::move(values);
        return t;
    }
    static Tensor scalar(T value) { return from({1}, {value}); }

    bool defined() const { return static_cast<bool>(st); }
    int64_t numel() const { return numel_of(dims); }
    int64_t ndims() const { return static_cast<int64_t>(dims.size()); }
    int64_t dim(size_t i) const { return dims.at(i); }

    T* ptr() { return st->data.data(); }
    const T* ptr() const { return st->data.data(); }
    std::vector<T>& values() { return st->data; }
    const std::vector<T>& values() const { return st->data; }
    T& operator[](int64_t i) { return st->data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return st->data[static_cast<size_t>(i)]; }

    // NCHW accessor (activations / conv weights)
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return st->data[static_cast<size_t>(((n * dims[1] + c) * dims[2] + h) * dims[3] + w)];
    }
    const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return st->data[static_cast<size_t>(((n * dims[1] + c) * dims[2] + h) * dims[3] + w)];
    }

    std::vector<T>& ensure_grad() const {
        if (st->grad.empty()) st->grad.assign(st->data.size(), T(0));
        return st->grad;
    }
    bool has_grad() const { return !st->grad.empty(); }
    std::vector<T>& grad() { return st->grad; }
    const std::vector<T>& grad() const { return st->grad; }
    void clear_grad() { std::vector<T>().swap(st->grad); }

    /// Deep copy of the values (fresh storage, no grad, no tape binding).
    Tensor clone() const {
        Tensor t;
        t.dims = dims;
        t.st = std::make_shared<Storage<T>>();
        t.st->data = st->data;
        t.requires_grad = requires_grad;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.dims = dims;
        t.st = std::make_shared<Storage<U>>();
        t.st->data.resize(st->data.size());
        for (size_t i = 0; i < st->data.size(); ++i)
            t.st->data[i] = static_cast<U>(st->data[i]);
        t.requires_grad = requires_grad;
        return t;
    }
};

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
    for (const T& v : t.st->data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op_name) {
    if (!all_finite(t))
        throw NumericsError(std::string("non-finite value produced by ") + op_name);
}

}  // namespace dscl
