#include "vesselkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include "vesselkit/error.hpp"

namespace vk::ad {

namespace {
std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;
}  // namespace

std::size_t numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <class T>
std::vector<T>& TensorImpl<T>::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T{0}, requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
    return from(shape, std::vector<T>(ad::numel(shape), value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> data, bool requires_grad) {
    if (shape.size() > 5) fail(ErrorCode::shape, "tensors have at most 5 dims, got " + shape_str(shape));
    if (data.size() != ad::numel(shape)) {
        fail(ErrorCode::shape, "data length " + std::to_string(data.size()) + " does not match shape " +
                                   shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) fail(ErrorCode::rank, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
    auto t = from(shape(), impl_->data, impl_->requires_grad);
    return t;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

template <class T>
void Tensor<T>::backward() const {
    ad::backward(*this);
}

template <class T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        fail(ErrorCode::rank, "backward needs a scalar loss, got shape " +
                                  (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    // Collect every tensor produced by a recorded op that the loss depends on.
    std::vector<TensorImpl<T>*> produced;
    std::unordered_set<const TensorImpl<T>*> seen;
    std::vector<TensorImpl<T>*> stack{loss.impl().get()};
    while (!stack.empty()) {
        TensorImpl<T>* t = stack.back();
        stack.pop_back();
        if (!seen.insert(t).second) continue;
        if (!t->grad_fn) continue;
        produced.push_back(t);
        for (const auto& in : t->grad_fn->inputs) stack.push_back(in.get());
    }
    std::sort(produced.begin(), produced.end(),
              [](const TensorImpl<T>* a, const TensorImpl<T>* b) { return a->grad_fn->seq > b->grad_fn->seq; });

    // Intermediate grads restart from zero on every sweep; only leaves accumulate.
    for (TensorImpl<T>* t : produced) t->grad.clear();
    auto& seed = loss.impl()->grad_buffer();
    seed[0] += T{1};
    for (TensorImpl<T>* t : produced) {
        if (t->grad.empty()) continue;
        t->grad_fn->backward(*t);
    }
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(const TensorImpl<T>& out)> backward_fn) {
    Tensor<T> out = Tensor<T>::from(shape, std::move(data));
    if (!t_grad_enabled) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.defined() && t.impl()->needs_grad(); });
    if (!any) return out;
    auto node = std::make_shared<Node<T>>();
    node->seq = g_next_seq.fetch_add(1);
    for (auto& in : inputs) {
        if (in.defined()) node->inputs.push_back(in.impl());
    }
    node->backward = std::move(backward_fn);
    out.impl()->grad_fn = std::move(node);
    return out;
}

template struct TensorImpl<float>;
template struct TensorImpl<double>;
template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template Tensor<float> make_result<float>(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                          std::function<void(const TensorImpl<float>&)>);
template Tensor<double> make_result<double>(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                            std::function<void(const TensorImpl<double>&)>);

}  // namespace vk::ad
