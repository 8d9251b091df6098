#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capscl::ad {

#ifdef CAPSCL_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not satisfy an operation's contract.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a forward value becomes NaN or infinite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor with an optional gradient buffer.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Parameters are tensors with requires_grad set; their gradient buffer
/// accumulates across backward passes until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows,
                         bool requires_grad = false);
    static Tensor vector(std::initializer_list<Scalar> values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    /// First dimension (1 for scalars).
    std::size_t rows() const;
    /// Product of all dimensions after the first (1 for rank <= 1).
    std::size_t cols() const;

    std::span<Scalar> data();
    std::span<const Scalar> data() const;
    Scalar& operator[](std::size_t i) { return data()[i]; }
    Scalar operator[](std::size_t i) const { return data()[i]; }
    Scalar& at(std::size_t r, std::size_t c) { return data()[r * cols() + c]; }
    Scalar at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
    /// Value of a single-element tensor.
    Scalar item() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    bool has_grad() const;
    /// Gradient buffer, allocated (zero) on first access. Writable through
    /// const handles so backward rules can accumulate into captured inputs.
    std::span<Scalar> grad() const;
    void zero_grad();

    Tensor clone() const;
    /// Same storage viewed under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::shared_ptr<std::vector<Scalar>> value;
        std::shared_ptr<std::vector<Scalar>> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Throws NumericError naming `op` if any element of t is not finite.
void check_finite(const Tensor& t, const char* op);

}  // namespace capscl::ad
