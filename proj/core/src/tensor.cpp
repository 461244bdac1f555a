#include "mdf/tensor.hpp"

#include <sstream>

#include "mdf/error.hpp"

namespace mdf {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (auto e : shape_) {
        if (e == 0) throw Error(Errc::shape_mismatch, "tensor extents must be positive, got " + shape_str(shape_));
    }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw Error(Errc::shape_mismatch, "shape " + shape_str(shape_) + " does not hold " +
                                              std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

double& Tensor::at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw Error(Errc::shape_mismatch, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t count) const {
    if (shape_.empty() || begin + count > shape_[0] || count == 0) {
        throw Error(Errc::shape_mismatch, "row slice out of range for " + shape_str(shape_));
    }
    const std::size_t stride = data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                    data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride)));
}

double Tensor::item() const {
    if (data_.size() != 1) throw Error(Errc::non_scalar_loss, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

}  // namespace mdf
