#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctg::autodiff {

class Tape;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense tensor of 64-bit reals. Value-semantic handle: copies share the
// underlying buffer. A tensor is either detached (plain storage, e.g. model
// parameters between runs) or attached to a Tape node, in which case
// Tape::backward fills its grad buffer. Detached tensors never receive
// gradient.
class Tensor {
public:
    Tensor() : values_(std::make_shared<std::vector<double>>()) {}

    Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          values_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          values_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (values_->size() != shape_numel(shape_)) {
            throw std::invalid_argument("Tensor: " + std::to_string(values_->size()) +
                                        " values for shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return values_->size(); }
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }
    bool is_scalar() const { return size() == 1; }

    const std::vector<double>& values() const { return *values_; }
    std::vector<double>& values() { return *values_; }
    double item() const {
        if (!is_scalar()) {
            throw std::invalid_argument("Tensor::item: tensor of shape " +
                                        shape_str(shape_) + " is not scalar");
        }
        return (*values_)[0];
    }
    double at(std::size_t r, std::size_t c) const { return (*values_)[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return (*values_)[r * cols() + c]; }

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node_id() const { return node_; }

    bool has_grad() const { return grad_ != nullptr; }
    const std::vector<double>& grad() const {
        if (!grad_) {
            throw std::logic_error("Tensor::grad: no gradient (detached tensor or "
                                   "backward not run)");
        }
        return *grad_;
    }

    // Plain copy of the values with no tape linkage.
    Tensor detached() const { return Tensor(shape_, *values_); }

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<std::vector<double>> values_;
    std::shared_ptr<std::vector<double>> grad_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

}  // namespace ctg::autodiff
