#include "soupkit/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include "soupkit/kernels.hpp"

namespace soup::ad {

namespace {

std::atomic<bool> g_finite_checks{false};
thread_local bool t_finite_checks = false;

template <class T>
void check_output(const Tensor<T>& t, const char* op) {
    if (finite_checks() && !t.all_finite()) {
        throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward_fn, const char* op) {
    check_output(value, op);
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(node));
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    const std::size_t r = x.rows();
    const std::size_t c = x.cols();
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    }
    return out;
}

template <class T>
void require_rank2(const Var<T>& x, const char* op) {
    if (x.value().rank() != 2) {
        throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(x.shape()));
    }
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace

void set_finite_checks(bool enabled) noexcept { g_finite_checks.store(enabled, std::memory_order_relaxed); }
bool finite_checks() noexcept { return t_finite_checks || g_finite_checks.load(std::memory_order_relaxed); }

ScopedFiniteChecks::ScopedFiniteChecks(bool enabled) noexcept : previous_(t_finite_checks) {
    t_finite_checks = t_finite_checks || enabled;
}

ScopedFiniteChecks::~ScopedFiniteChecks() { t_finite_checks = previous_; }

template <class T>
void Var<T>::backward() {
    if (node_->value.size() != 1) throw DimensionError("backward() requires a single-element output");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
    if (b.value().dim(0) != k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor<T> out({m, n});
    kernels::gemm_nn<T>(a.value().data(), b.value().data(), out.data(), m, k, n, false);
    auto an = a.node();
    auto bn = b.node();
    return make_result<T>(
        std::move(out), {an, bn},
        [an, bn, m, k, n](Node<T>& self) {
            if (an->requires_grad) {
                const Tensor<T> bt = transpose(bn->value);
                kernels::gemm_nn<T>(self.grad.data(), bt.data(), an->ensure_grad().data(), m, n, k, true);
            }
            if (bn->requires_grad) {
                kernels::gemm_tn<T>(an->value.data(), self.grad.data(), bn->ensure_grad().data(), m, k, n);
            }
        },
        "matmul");
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = a.value();
    kernels::add_inplace<T>(b.value().data(), out.data());
    auto an = a.node();
    auto bn = b.node();
    return make_result<T>(
        std::move(out), {an, bn},
        [an, bn](Node<T>& self) {
            if (an->requires_grad) kernels::add_inplace<T>(self.grad.data(), an->ensure_grad().data());
            if (bn->requires_grad) kernels::add_inplace<T>(self.grad.data(), bn->ensure_grad().data());
        },
        "add");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_result<T>(
        std::move(out), {an, bn},
        [an, bn](Node<T>& self) {
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
            }
        },
        "mul");
}

template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
    require_rank2(x, "add_bias");
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    if (bias.value().size() != cols) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    }
    Tensor<T> out = x.value();
    for (std::size_t r = 0; r < rows; ++r) kernels::add_inplace<T>(bias.value().data(), out.row(r));
    auto xn = x.node();
    auto bn = bias.node();
    return make_result<T>(
        std::move(out), {xn, bn},
        [xn, bn, rows](Node<T>& self) {
            if (xn->requires_grad) kernels::add_inplace<T>(self.grad.data(), xn->ensure_grad().data());
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) kernels::add_inplace<T>(self.grad.row(r), g.data());
            }
        },
        "add_bias");
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    auto xn = x.node();
    return make_result<T>(
        std::move(out), {xn},
        [xn, factor](Node<T>& self) { kernels::axpy<T>(factor, self.grad.data(), xn->ensure_grad().data()); },
        "scale");
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = v > T(0) ? v : T(0);
    auto xn = x.node();
    return make_result<T>(
        std::move(out), {xn},
        [xn](Node<T>& self) {
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xn->value[i] > T(0)) g[i] += self.grad[i];
            }
        },
        "relu");
}

template <class T>
Var<T> gelu(const Var<T>& x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.value()[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
    }
    auto xn = x.node();
    return make_result<T>(
        std::move(out), {xn},
        [xn](Node<T>& self) {
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = xn->value[i];
                const T th = std::tanh(c * (v + a * v * v * v));
                const T dth = (T(1) - th * th) * c * (T(1) + T(3) * a * v * v);
                g[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * dth);
            }
        },
        "gelu");
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
    auto xn = x.node();
    return make_result<T>(
        std::move(out), {xn},
        [xn](Node<T>& self) {
            auto& g = xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T y = std::tanh(xn->value[i]);
                g[i] += self.grad[i] * (T(1) - y * y);
            }
        },
        "tanh");
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    require_rank2(x, "layer_norm");
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    if (gain.value().size() != cols || bias.value().size() != cols) {
        throw DimensionError("layer_norm: gain/bias width must equal " + std::to_string(cols));
    }
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = x.value().row(r);
        T mean = T(0);
        for (T v : in) mean += v;
        mean /= T(cols);
        T var = T(0);
        for (T v : in) var += (v - mean) * (v - mean);
        var /= T(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const T h = (in[c] - mean) * is;
            xhat(r, c) = h;
            out(r, c) = h * gain.value()[c] + bias.value()[c];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return make_result<T>(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](Node<T>& self) {
            if (gn->requires_grad) {
                auto& g = gn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad(r, c) * xhat(r, c);
                }
            }
            if (bn->requires_grad) {
                auto& g = bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) kernels::add_inplace<T>(self.grad.row(r), g.data());
            }
            if (xn->requires_grad) {
                auto& g = xn->ensure_grad();
                std::vector<T> dxhat(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_d = T(0), mean_dx = T(0);
                    for (std::size_t c = 0; c < cols; ++c) {
                        dxhat[c] = self.grad(r, c) * gn->value[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat(r, c);
                    }
                    mean_d /= T(cols);
                    mean_dx /= T(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        g(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                    }
                }
            }
        },
        "layer_norm");
}

template <class T>
Var<T> embedding(const Var<T>& table, std::span<const std::uint32_t> ids) {
    require_rank2(table, "embedding");
    const std::size_t vocab = table.value().rows(), width = table.value().cols();
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    Tensor<T> out({ids.size(), width});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw IndexError("embedding id " + std::to_string(ids[i]) + " >= table rows " + std::to_string(vocab));
        }
        std::copy_n(table.value().row(ids[i]).begin(), width, out.row(i).begin());
    }
    auto tn = table.node();
    std::vector<std::uint32_t> saved(ids.begin(), ids.end());
    return make_result<T>(
        std::move(out), {tn},
        [tn, saved = std::move(saved)](Node<T>& self) {
            auto& g = tn->ensure_grad();
            for (std::size_t i = 0; i < saved.size(); ++i) kernels::add_inplace<T>(self.grad.row(i), g.row(saved[i]));
        },
        "embedding");
}

template <class T>
Var<T> causal_attention(const Var<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
    require_rank2(qkv, "causal_attention");
    const std::size_t rows = qkv.value().rows(), width = qkv.value().cols();
    if (rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0) {
        throw DimensionError("causal_attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch=" +
                             std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
    }
    const std::size_t d = width / 3, hd = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(hd));
    const Tensor<T>& in = qkv.value();
    Tensor<T> out({rows, d});
    // probs[b][h][t][s], s <= t used.
    std::vector<T> probs(batch * heads * seq * seq, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            T* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t t = 0; t < seq; ++t) {
                const T* q = &in[(b * seq + t) * width + h * hd];
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* kk = &in[(b * seq + s) * width + d + h * hd];
                    T dot = T(0);
                    for (std::size_t e = 0; e < hd; ++e) dot += q[e] * kk[e];
                    p[t * seq + s] = dot * inv_sqrt;
                    mx = std::max(mx, p[t * seq + s]);
                }
                T denom = T(0);
                for (std::size_t s = 0; s <= t; ++s) {
                    p[t * seq + s] = std::exp(p[t * seq + s] - mx);
                    denom += p[t * seq + s];
                }
                T* o = &out[(b * seq + t) * d + h * hd];
                for (std::size_t s = 0; s <= t; ++s) {
                    p[t * seq + s] /= denom;
                    const T w = p[t * seq + s];
                    const T* v = &in[(b * seq + s) * width + 2 * d + h * hd];
                    for (std::size_t e = 0; e < hd; ++e) o[e] += w * v[e];
                }
            }
        }
    }
    auto qn = qkv.node();
    return make_result<T>(
        std::move(out), {qn},
        [qn, probs = std::move(probs), batch, seq, heads, d, hd, width, inv_sqrt](Node<T>& self) {
            const Tensor<T>& in = qn->value;
            Tensor<T>& g = qn->ensure_grad();
            std::vector<T> dp(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t t = 0; t < seq; ++t) {
                        const T* dout = &self.grad[(b * seq + t) * d + h * hd];
                        T rowdot = T(0);
                        for (std::size_t s = 0; s <= t; ++s) {
                            const T* v = &in[(b * seq + s) * width + 2 * d + h * hd];
                            T* dv = &g[(b * seq + s) * width + 2 * d + h * hd];
                            const T w = p[t * seq + s];
                            T acc = T(0);
                            for (std::size_t e = 0; e < hd; ++e) {
                                acc += dout[e] * v[e];
                                dv[e] += w * dout[e];
                            }
                            dp[s] = acc;
                            rowdot += acc * w;
                        }
                        const T* q = &in[(b * seq + t) * width + h * hd];
                        T* dq = &g[(b * seq + t) * width + h * hd];
                        for (std::size_t s = 0; s <= t; ++s) {
                            const T ds = p[t * seq + s] * (dp[s] - rowdot) * inv_sqrt;
                            const T* kk = &in[(b * seq + s) * width + d + h * hd];
                            T* dk = &g[(b * seq + s) * width + d + h * hd];
                            for (std::size_t e = 0; e < hd; ++e) {
                                dq[e] += ds * kk[e];
                                dk[e] += ds * q[e];
                            }
                        }
                    }
                }
            }
        },
        "causal_attention");
}

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
    require_rank2(x, "softmax_rows");
    if (!x.value().all_finite()) throw NumericError("softmax_rows: non-finite input");
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    Tensor<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const auto in = x.value().row(r);
        auto o = out.row(r);
        const T mx = *std::max_element(in.begin(), in.end());
        T denom = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            denom += o[c];
        }
        for (auto& v : o) v /= denom;
    }
    auto xn = x.node();
    auto saved = out;
    return make_result<T>(
        std::move(out), {xn},
        [xn, saved = std::move(saved), rows, cols](Node<T>& self) {
            auto& g = xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = T(0);
                for (std::size_t c = 0; c < cols; ++c) dot += self.grad(r, c) * saved(r, c);
                for (std::size_t c = 0; c < cols; ++c) g(r, c) += saved(r, c) * (self.grad(r, c) - dot);
            }
        },
        "softmax_rows");
}

template <class T>
Var<T> cross_entropy_mean(const Var<T>& logits, std::span<const std::uint32_t> targets) {
    require_rank2(logits, "cross_entropy_mean");
    const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    }
    if (!logits.value().all_finite()) throw NumericError("cross_entropy_mean: non-finite logits");
    Tensor<T> probs(logits.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) {
            throw IndexError("target id " + std::to_string(targets[r]) + " >= vocabulary " + std::to_string(cols));
        }
        const auto in = logits.value().row(r);
        auto p = probs.row(r);
        const T mx = *std::max_element(in.begin(), in.end());
        T denom = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(in[c] - mx);
            denom += p[c];
        }
        const T log_denom = std::log(denom);
        total += static_cast<double>(log_denom - (in[targets[r]] - mx));
        for (auto& v : p) v /= denom;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
    auto ln = logits.node();
    std::vector<std::uint32_t> saved(targets.begin(), targets.end());
    return make_result<T>(
        std::move(out), {ln},
        [ln, probs = std::move(probs), saved = std::move(saved), rows, cols](Node<T>& self) {
            auto& g = ln->ensure_grad();
            const T up = self.grad[0] / T(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    const T indicator = c == saved[r] ? T(1) : T(0);
                    g(r, c) += up * (probs(r, c) - indicator);
                }
            }
        },
        "cross_entropy_mean");
}

template <class T>
Var<T> sum(const Var<T>& x) {
    T total = T(0);
    for (T v : x.value().data()) total += v;
    auto xn = x.node();
    return make_result<T>(
        Tensor<T>::scalar(total), {xn},
        [xn](Node<T>& self) {
            auto& g = xn->ensure_grad();
            for (auto& v : g.data()) v += self.grad[0];
        },
        "sum");
}

#define SOUP_INSTANTIATE(T)                                                                         \
    template class Var<T>;                                                                          \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                           \
    template Var<T> add(const Var<T>&, const Var<T>&);                                              \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
    template Var<T> add_bias(const Var<T>&, const Var<T>&);                                         \
    template Var<T> scale(const Var<T>&, T);                                                        \
    template Var<T> relu(const Var<T>&);                                                            \
    template Var<T> gelu(const Var<T>&);                                                            \
    template Var<T> tanh(const Var<T>&);                                                            \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                     \
    template Var<T> embedding(const Var<T>&, std::span<const std::uint32_t>);                       \
    template Var<T> causal_attention(const Var<T>&, std::size_t, std::size_t, std::size_t);         \
    template Var<T> softmax_rows(const Var<T>&);                                                    \
    template Var<T> cross_entropy_mean(const Var<T>&, std::span<const std::uint32_t>);              \
    template Var<T> sum(const Var<T>&);

SOUP_INSTANTIATE(float)
SOUP_INSTANTIATE(double)

#undef SOUP_INSTANTIATE

}  // namespace soup::ad
