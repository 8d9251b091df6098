#include "capscl/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <type_traits>

namespace capscl::ad {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    const auto n = shape_numel(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::make_shared<std::vector<Scalar>>(n, value);
    t.impl_->grad = std::make_shared<std::vector<Scalar>>();
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::make_shared<std::vector<Scalar>>(std::move(values));
    t.impl_->grad = std::make_shared<std::vector<Scalar>>();
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Scalar>> rows,
                      bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Scalar> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return from({r, c}, std::move(values), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<Scalar> values, bool requires_grad) {
    return from({values.size()}, std::vector<Scalar>(values), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->value->size() : 0; }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    return s.empty() ? 1 : s[0];
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() <= 1) return 1;
    std::size_t n = 1;
    for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
    return n;
}

std::span<Scalar> Tensor::data() {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    return {impl_->value->data(), impl_->value->size()};
}

std::span<const Scalar> Tensor::data() const {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    return {impl_->value->data(), impl_->value->size()};
}

Scalar Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("tensor: item() on tensor of shape " + shape_string(shape()));
    }
    return (*impl_->value)[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad->empty(); }

std::span<Scalar> Tensor::grad() const {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    if (impl_->grad->size() != impl_->value->size()) {
        impl_->grad->assign(impl_->value->size(), Scalar(0));
    }
    return {impl_->grad->data(), impl_->grad->size()};
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad->empty()) {
        std::fill(impl_->grad->begin(), impl_->grad->end(), Scalar(0));
    }
}

Tensor Tensor::clone() const {
    Tensor t = from(shape(), *impl_->value, impl_->requires_grad);
    return t;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw DimensionError("tensor: cannot reshape " + shape_string(this->shape()) + " to " +
                             shape_string(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    t.impl_->shape = std::move(shape);
    return t;
}

void check_finite(const Tensor& t, const char* op) {
    // Branch-free exponent test so the scan vectorizes.
    using Bits = std::conditional_t<sizeof(Scalar) == 8, std::uint64_t, std::uint32_t>;
    constexpr Bits exponent = sizeof(Scalar) == 8 ? Bits(0x7ff0000000000000ULL) : Bits(0x7f800000U);
    Bits bad = 0;
    for (Scalar v : t.data()) bad |= Bits((std::bit_cast<Bits>(v) & exponent) == exponent);
    if (bad) throw NumericError(std::string(op) + ": non-finite value in output");
}

}  // namespace capscl::ad
