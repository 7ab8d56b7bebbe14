#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "sfms/common.hpp"

namespace sfms {

// Dense row-major matrix. Owns its storage; Eigen maps provide the heavy
// kernels (matmul) without copying.
template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, T(0)) {}
    Mat(int r, int c, std::initializer_list<T> vals) : rows(r), cols(c), a(vals) {
        if (static_cast<int>(a.size()) != r * c)
            throw DimensionError("Mat initializer size mismatch");
    }

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat full(int r, int c, T v) {
        Mat m(r, c);
        std::fill(m.a.begin(), m.a.end(), v);
        return m;
    }

    T& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    T operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }

    std::size_t size() const { return a.size(); }
    T* data() { return a.data(); }
    const T* data() const { return a.data(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (T v : a)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    using EMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using CEMap =
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    EMap map() { return EMap(a.data(), rows, cols); }
    CEMap map() const { return CEMap(a.data(), rows, cols); }
};

// out = a * b
template <class T>
void matmul_into(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols != b.rows) throw DimensionError("matmul: inner dimensions differ");
    out = Mat<T>(a.rows, b.cols);
    out.map().noalias() = a.map() * b.map();
}

// out += a * b  (used by backward accumulation)
template <class T>
void matmul_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    out.map().noalias() += a.map() * b.map();
}

template <class T>
void matmul_transA_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    out.map().noalias() += a.map().transpose() * b.map();
}

template <class T>
void matmul_transB_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    out.map().noalias() += a.map() * b.map().transpose();
}

// out = a * b^T
template <class T>
void matmul_transB_into(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
    if (a.cols != b.cols) throw DimensionError("matmul_transB: inner dimensions differ");
    out = Mat<T>(a.rows, b.rows);
    out.map().noalias() = a.map() * b.map().transpose();
}

}  // namespace sfms
