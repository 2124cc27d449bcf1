#pragma once

#include <cstdint>
#include <vector>

#include "soupkit/autodiff.hpp"

namespace soup {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moment buffers are parameter-shaped; step counts completed updates.
template <class T>
struct AdamState {
    AdamHyper hyper;
    std::vector<Tensor<T>> first_moment;
    std::vector<Tensor<T>> second_moment;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(AdamHyper h, const std::vector<const Tensor<T>*>& params);
};

// Bias-corrected Adam update applied in place. grads[i] must match params[i].
template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state);

// Convenience wrapper over a list of leaf Vars whose gradients were produced by backward().
template <class T>
class Adam {
public:
    Adam(std::vector<ad::Var<T>> params, AdamHyper hyper);

    void step();
    void zero_grad();
    void set_lr(double lr) { state_.hyper.lr = lr; }
    const AdamState<T>& state() const { return state_; }

private:
    std::vector<ad::Var<T>> params_;
    AdamState<T> state_;
};

}  // namespace soup
