#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qseg {

/// Dense row-major n-d array of doubles. The universal numeric carrier for
/// images, feature maps, masks and parameters. Values are immutable by
/// convention once an operation has produced them.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> values);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }

    double& operator()(int i) { return data_[static_cast<size_t>(i)]; }
    const double& operator()(int i) const { return data_[static_cast<size_t>(i)]; }
    double& operator()(int i, int j) { return data_[idx2(i, j)]; }
    const double& operator()(int i, int j) const { return data_[idx2(i, j)]; }
    double& operator()(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    const double& operator()(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    double& operator()(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
    const double& operator()(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    void fill(double value);

    std::size_t idx2(int i, int j) const {
        return static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j);
    }
    std::size_t idx3(int i, int j, int k) const {
        return (static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j)) *
                   static_cast<size_t>(shape_[2]) +
               static_cast<size_t>(k);
    }
    std::size_t idx4(int i, int j, int k, int l) const {
        return ((static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j)) *
                    static_cast<size_t>(shape_[2]) +
                static_cast<size_t>(k)) *
                   static_cast<size_t>(shape_[3]) +
               static_cast<size_t>(l);
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

/// Value plus gradient of a scalar loss with respect to it. The gradient is
/// absent for non-trainable inputs.
struct GradPair {
    Tensor value;
    std::optional<Tensor> gradient;
};

std::string shape_string(const std::vector<int>& shape);

enum class Precision { f32, f64 };

/// Writes "v1 <rank> <extent...> <precision>\n" followed by little-endian raw
/// values. f32 narrows on write and widens back on read.
void save_tensor(const Tensor& t, const std::string& path, Precision prec = Precision::f64);
Tensor load_tensor(const std::string& path);

}  // namespace qseg
