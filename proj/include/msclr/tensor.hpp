#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "msclr/errors.hpp"

namespace msclr {

// Dense row-major double tensor. The last index varies fastest.
class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (auto d : shape_) {
            if (d < 0) throw shape_error("negative tensor dimension");
            n *= d;
        }
        data_.assign(static_cast<std::size_t>(n), 0.0);
        recompute_strides();
    }

    Tensor(std::initializer_list<std::int64_t> shape)
        : Tensor(std::vector<std::int64_t>(shape)) {}

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void set_zero() { fill(0.0); }

    template <class... I>
    double& operator()(I... idx) {
        return data_[offset(idx...)];
    }
    template <class... I>
    double operator()(I... idx) const {
        return data_[offset(idx...)];
    }

    double& flat(std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double flat(std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    Tensor& operator+=(const Tensor& o) {
        assert(same_shape(o));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

   private:
    template <class... I>
    std::size_t offset(I... idx) const {
        assert(sizeof...(idx) == shape_.size());
        const std::int64_t ids[] = {static_cast<std::int64_t>(idx)...};
        std::int64_t off = 0;
        for (std::size_t k = 0; k < sizeof...(idx); ++k) {
            assert(ids[k] >= 0 && ids[k] < shape_[k]);
            off += ids[k] * strides_[k];
        }
        return static_cast<std::size_t>(off);
    }

    void recompute_strides() {
        strides_.assign(shape_.size(), 1);
        for (std::size_t k = shape_.size(); k-- > 1;)
            strides_[k - 1] = strides_[k] * shape_[k];
    }

    std::vector<std::int64_t> shape_;
    std::vector<std::int64_t> strides_;
    std::vector<double> data_;
};

}  // namespace msclr
