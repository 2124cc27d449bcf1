#include "soupkit/optim.hpp"

#include <cmath>
#include <string>

namespace soup {

template <class T>
AdamState<T>::AdamState(AdamHyper h, const std::vector<const Tensor<T>*>& params) : hyper(h) {
    first_moment.reserve(params.size());
    second_moment.reserve(params.size());
    for (const auto* p : params) {
        first_moment.emplace_back(p->shape());
        second_moment.emplace_back(p->shape());
    }
}

template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
        throw DimensionError("adam_step: parameter, gradient and state counts differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.first_moment[i].shape()) {
            throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(i) + " " +
                                 shape_str(params[i]->shape()) + " vs gradient " + shape_str(grads[i]->shape()));
        }
    }
    state.step += 1;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        auto g = grads[i]->data();
        auto m = state.first_moment[i].data();
        auto v = state.second_moment[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = h.beta1 * static_cast<double>(m[j]) + (1.0 - h.beta1) * gj;
            const double vj = h.beta2 * static_cast<double>(v[j]) + (1.0 - h.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = h.lr * (mj / bc1) / (std::sqrt(vj / bc2) + h.eps);
            p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
        }
    }
}

template <class T>
Adam<T>::Adam(std::vector<ad::Var<T>> params, AdamHyper hyper) : params_(std::move(params)) {
    std::vector<const Tensor<T>*> values;
    for (const auto& p : params_) values.push_back(&p.value());
    state_ = AdamState<T>(hyper, values);
}

template <class T>
void Adam<T>::step() {
    std::vector<Tensor<T>*> values;
    std::vector<const Tensor<T>*> grads;
    std::vector<Tensor<T>> zeros;  // parameters that received no gradient this step
    zeros.reserve(params_.size());
    for (auto& p : params_) {
        values.push_back(&p.mutable_value());
        if (p.has_grad()) {
            grads.push_back(&p.grad());
        } else {
            zeros.emplace_back(p.shape());
            grads.push_back(&zeros.back());
        }
    }
    adam_step(values, grads, state_);
}

template <class T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(const std::vector<Tensor<float>*>&, const std::vector<const Tensor<float>*>&,
                               AdamState<float>&);
template void adam_step<double>(const std::vector<Tensor<double>*>&, const std::vector<const Tensor<double>*>&,
                                AdamState<double>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace soup
