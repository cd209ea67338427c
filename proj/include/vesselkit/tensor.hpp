#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vk::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

template <class T>
struct TensorImpl;

/// Record of one executed operation. `seq` increases monotonically with
/// execution, so sorting by it recovers the exact execution order.
template <class T>
struct Node {
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    /// Reads the output's grad and accumulates into the inputs' grads.
    std::function<void(const TensorImpl<T>& out)> backward;
};

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient flows here
    bool requires_grad = false;
    std::shared_ptr<Node<T>> grad_fn;

    [[nodiscard]] bool needs_grad() const noexcept { return requires_grad || grad_fn != nullptr; }
    /// Allocates a zero gradient on first use and returns it.
    std::vector<T>& grad_buffer();
};

/// Dense row-major tensor handle (up to 5 dims, N C D H W for volumes).
/// Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, T value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<T> data, bool requires_grad = false);

    [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
    [[nodiscard]] const Shape& shape() const { return impl_->shape; }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
    [[nodiscard]] std::size_t numel() const { return impl_->data.size(); }

    [[nodiscard]] std::span<T> data() { return impl_->data; }
    [[nodiscard]] std::span<const T> data() const { return impl_->data; }
    [[nodiscard]] std::vector<T>& storage() { return impl_->data; }
    [[nodiscard]] bool has_grad() const { return !impl_->grad.empty(); }
    [[nodiscard]] std::span<const T> grad() const { return impl_->grad; }
    [[nodiscard]] std::span<T> grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }
    [[nodiscard]] T item() const;

    /// Deep copy of data without graph history.
    [[nodiscard]] Tensor clone() const;
    /// Same data, cut from the graph.
    [[nodiscard]] Tensor detach() const;

    /// Reverse sweep from this scalar; see ad::backward.
    void backward() const;

    [[nodiscard]] const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

/// Populates grads of every requires_grad leaf reachable from `loss`,
/// visiting recorded nodes in reverse execution order. Grads accumulate.
template <class T>
void backward(const Tensor<T>& loss);

/// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

/// Creates an op result. When recording is enabled and any input needs a
/// gradient, a Node with the given backward closure is attached.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>& out)> backward_fn);

}  // namespace vk::ad
