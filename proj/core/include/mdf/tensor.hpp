#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mdf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. 4-D tensors follow the (B, C, H, W) layout.
///
/// Computation runs in fp64 throughout; checkpoints narrow to fp32 on disk.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor from(std::initializer_list<double> values);

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t numel() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// 4-D element access.
    double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w);
    [[nodiscard]] double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const;

    /// Same data, new shape. Throws shape_mismatch when element counts differ.
    [[nodiscard]] Tensor reshaped(Shape shape) const;

    /// Rows [begin, begin+count) along axis 0.
    [[nodiscard]] Tensor slice_rows(std::size_t begin, std::size_t count) const;

    /// Scalar value of a one-element tensor.
    [[nodiscard]] double item() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace mdf
