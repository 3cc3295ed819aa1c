#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "atp/common.hpp"

namespace atp {

// Dense row-major tensor of float or double. Plain value type: copy copies
// the data. Rank 1 and 2 cover everything in this project.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    // 2-D row-major from nested braces, for tests and small fixtures.
    static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        int r = static_cast<int>(rows.size());
        int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        Tensor t({r, c});
        int i = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c) throw ShapeError("ragged rows in from_rows");
            for (T v : row) t.data[static_cast<size_t>(i++)] = v;
        }
        return t;
    }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = T(1);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const {
        require_rank(2, "rows()");
        return shape[0];
    }
    int cols() const {
        require_rank(2, "cols()");
        return shape[1];
    }

    T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T& at(int i) { return data[static_cast<size_t>(i)]; }
    T at(int i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void require_rank(int r, const char* what) const {
        if (rank() != r) {
            throw ShapeError(std::string(what) + " requires rank " + std::to_string(r) +
                             ", tensor has shape " + shape_str(shape));
        }
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i) {
        if (std::memcmp(&a.data[i], &b.data[i], sizeof(T)) != 0) return false;
    }
    return true;
}

}  // namespace atp
