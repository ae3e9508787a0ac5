#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "granvit/errors.hpp"
#include "granvit/rng.hpp"

namespace granvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

// Backing store. `producer`/`tape_id` tie a tensor to the tape node that
// created it; leaves keep producer == -1.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::int64_t producer = -1;
    std::uint64_t tape_id = 0;
};

}  // namespace detail

// Dense row-major double tensor. Immutable by convention after an op creates
// it; only leaves (parameters, optimizer state) are mutated in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeMismatchError("from_data: " + shape_str(shape) + " does not hold " +
                                     std::to_string(data.size()) + " values");
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data(Shape{}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape));
        for (double& v : d) v = rng.normal(0.0, stddev);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    // In-place mutation; reserved for leaves (optimizer updates, EMA blends).
    std::vector<double>& mutable_data() { return node_->data; }

    // Leaves only: flips trainability before a stage starts.
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    double item() const {
        if (node_->data.size() != 1)
            throw NotScalarError("item() on tensor of shape " + shape_str(node_->shape));
        return node_->data[0];
    }

    double at2(std::size_t i, std::size_t j) const {
        return node_->data[i * node_->shape[1] + j];
    }

    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data[(i * node_->shape[1] + j) * node_->shape[2] + k];
    }

    // Independent copy sharing nothing with the source.
    Tensor clone(bool requires_grad) const {
        return from_data(node_->shape, node_->data, requires_grad);
    }

    bool all_finite() const {
        for (double v : node_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    const detail::TensorNode* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::TensorNode> node_;
    friend class Tape;
};

}  // namespace granvit
