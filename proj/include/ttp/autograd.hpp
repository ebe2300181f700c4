#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

// Matrix-level reverse-mode differentiation. Every op records its output value
// and a closure that accumulates input gradients from the output gradient.
namespace ttp::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// One attention block: queries [q0, q0 + qseg.size()) attend to keys
// [k0, k0 + kseg.size()). A negative segment marks padding. With `causal`,
// query i sees key j iff kseg[j] <= qseg[i]; otherwise it sees every
// non-padding key. A query with no visible key outputs zero.
struct AttentionBlock {
    int q0 = 0;
    int k0 = 0;
    std::vector<int> qseg;
    std::vector<int> kseg;
    bool causal = true;
};

// One selection problem: row `h_row` of H scores rows `rows` of E; `target`
// indexes into `rows`.
struct SelectItem {
    int h_row = 0;
    std::vector<int> rows;
    int target = 0;
};

template <class S>
class Tape {
public:
    using M = Mat<S>;

    Var leaf(M value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
    Var constant(M value) { return leaf(std::move(value), false); }

    const M& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const M& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs every closure in
    // reverse order. Gradients of nodes that do not need them stay empty.
    void backward(Var loss) {
        for (auto& n : nodes_) {
            if (n.needs_grad) {
                n.grad = M::Zero(n.value.rows(), n.value.cols());
            }
        }
        auto& root = node(loss);
        if (root.value.size() != 1) {
            throw std::invalid_argument("backward expects a scalar");
        }
        if (!root.needs_grad) {
            return;
        }
        root.grad(0, 0) = S(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].needs_grad && nodes_[i].back) {
                nodes_[i].back();
            }
        }
    }

    // X W (+ b broadcast over rows).
    // `row_stable` evaluates each output row with the same accumulation order
    // regardless of the row count, so batched and single-row results agree
    // bitwise.
    Var linear(Var x, Var w, Var b = {}, bool row_stable = false) {
        M out = row_stable ? M(value(x).lazyProduct(value(w))) : M(value(x) * value(w));
        if (b.valid()) {
            out.rowwise() += value(b).row(0);
        }
        return push(std::move(out), {x, w, b}, [this, x, w, b](Var o) {
            const M& g = grad(o);
            if (needs_grad(x)) {
                mgrad(x).noalias() += g * value(w).transpose();
            }
            if (needs_grad(w)) {
                mgrad(w).noalias() += value(x).transpose() * g;
            }
            if (b.valid() && needs_grad(b)) {
                mgrad(b).row(0) += g.colwise().sum();
            }
        });
    }

    Var matmul(Var a, Var b) {
        return push(value(a) * value(b), {a, b}, [this, a, b](Var o) {
            const M& g = grad(o);
            if (needs_grad(a)) {
                mgrad(a).noalias() += g * value(b).transpose();
            }
            if (needs_grad(b)) {
                mgrad(b).noalias() += value(a).transpose() * g;
            }
        });
    }

    // A B^T
    Var matmul_nt(Var a, Var b) {
        return push(value(a) * value(b).transpose(), {a, b}, [this, a, b](Var o) {
            const M& g = grad(o);
            if (needs_grad(a)) {
                mgrad(a).noalias() += g * value(b);
            }
            if (needs_grad(b)) {
                mgrad(b).noalias() += g.transpose() * value(a);
            }
        });
    }

    // A^T B
    Var matmul_tn(Var a, Var b) {
        return push(value(a).transpose() * value(b), {a, b}, [this, a, b](Var o) {
            const M& g = grad(o);
            if (needs_grad(a)) {
                mgrad(a).noalias() += value(b) * g.transpose();
            }
            if (needs_grad(b)) {
                mgrad(b).noalias() += value(a) * g;
            }
        });
    }

    Var add(Var a, Var b) {
        return push(value(a) + value(b), {a, b}, [this, a, b](Var o) {
            if (needs_grad(a)) {
                mgrad(a) += grad(o);
            }
            if (needs_grad(b)) {
                mgrad(b) += grad(o);
            }
        });
    }

    Var sub(Var a, Var b) {
        return push(value(a) - value(b), {a, b}, [this, a, b](Var o) {
            if (needs_grad(a)) {
                mgrad(a) += grad(o);
            }
            if (needs_grad(b)) {
                mgrad(b) -= grad(o);
            }
        });
    }

    Var hadamard(Var a, Var b) {
        return push(value(a).cwiseProduct(value(b)), {a, b}, [this, a, b](Var o) {
            if (needs_grad(a)) {
                mgrad(a) += grad(o).cwiseProduct(value(b));
            }
            if (needs_grad(b)) {
                mgrad(b) += grad(o).cwiseProduct(value(a));
            }
        });
    }

    Var scale(Var a, S factor) {
        return push(value(a) * factor, {a}, [this, a, factor](Var o) { mgrad(a) += grad(o) * factor; });
    }

    Var relu(Var a) {
        return push(value(a).cwiseMax(S(0)), {a}, [this, a](Var o) {
            mgrad(a) += (value(a).array() > S(0)).select(grad(o), S(0));
        });
    }

    Var sigmoid(Var a) {
        M out = value(a).unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
        return push(std::move(out), {a}, [this, a](Var o) {
            const M& y = value(o);
            mgrad(a).array() += grad(o).array() * y.array() * (S(1) - y.array());
        });
    }

    Var tanh(Var a) {
        M out = value(a).unaryExpr([](S v) { return std::tanh(v); });
        return push(std::move(out), {a}, [this, a](Var o) {
            const M& y = value(o);
            mgrad(a).array() += grad(o).array() * (S(1) - y.array().square());
        });
    }

    Var exp(Var a) {
        M out = value(a).unaryExpr([](S v) { return std::exp(v); });
        return push(std::move(out), {a}, [this, a](Var o) { mgrad(a).array() += grad(o).array() * value(o).array(); });
    }

    // Row-wise normalization with gain and bias (each 1 x cols).
    Var layer_norm(Var x, Var gain, Var bias, S eps = S(1e-5)) {
        const M& xv = value(x);
        const Eigen::Index n = xv.rows();
        const Eigen::Index c = xv.cols();
        M xhat(n, c);
        Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const S mean = xv.row(i).mean();
            const S var = (xv.row(i).array() - mean).square().mean();
            inv_std(i) = S(1) / std::sqrt(var + eps);
            xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
        }
        M out = xhat;
        out.array().rowwise() *= value(gain).row(0).array();
        out.rowwise() += value(bias).row(0);
        return push(std::move(out), {x, gain, bias},
                    [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Var o) {
                        const M& g = grad(o);
                        if (needs_grad(gain)) {
                            mgrad(gain).row(0) += g.cwiseProduct(xhat).colwise().sum();
                        }
                        if (needs_grad(bias)) {
                            mgrad(bias).row(0) += g.colwise().sum();
                        }
                        if (needs_grad(x)) {
                            M dxhat = g;
                            dxhat.array().rowwise() *= value(gain).row(0).array();
                            auto& dx = mgrad(x);
                            for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                                const S m1 = dxhat.row(i).mean();
                                const S m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                                dx.row(i).array() +=
                                    inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                            }
                        }
                    });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        Eigen::Index rows = value(parts.front()).rows();
        Eigen::Index cols = 0;
        for (Var p : parts) {
            if (value(p).rows() != rows) {
                throw std::invalid_argument("concat_cols: row mismatch");
            }
            cols += value(p).cols();
        }
        M out(rows, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            out.middleCols(at, value(p).cols()) = value(p);
            at += value(p).cols();
        }
        return push(std::move(out), parts, [this, parts](Var o) {
            Eigen::Index c0 = 0;
            for (Var p : parts) {
                const Eigen::Index w = value(p).cols();
                if (needs_grad(p)) {
                    mgrad(p) += grad(o).middleCols(c0, w);
                }
                c0 += w;
            }
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        Eigen::Index rows = 0;
        const Eigen::Index cols = value(parts.front()).cols();
        for (Var p : parts) {
            if (value(p).cols() != cols) {
                throw std::invalid_argument("concat_rows: column mismatch");
            }
            rows += value(p).rows();
        }
        M out(rows, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            out.middleRows(at, value(p).rows()) = value(p);
            at += value(p).rows();
        }
        return push(std::move(out), parts, [this, parts](Var o) {
            Eigen::Index r0 = 0;
            for (Var p : parts) {
                const Eigen::Index h = value(p).rows();
                if (needs_grad(p)) {
                    mgrad(p) += grad(o).middleRows(r0, h);
                }
                r0 += h;
            }
        });
    }

    Var slice_cols(Var x, Eigen::Index c0, Eigen::Index width) {
        return push(value(x).middleCols(c0, width), {x},
                    [this, x, c0, width](Var o) { mgrad(x).middleCols(c0, width) += grad(o); });
    }

    Var gather_rows(Var x, std::vector<int> idx) {
        M out(static_cast<Eigen::Index>(idx.size()), value(x).cols());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.row(static_cast<Eigen::Index>(r)) = value(x).row(idx[r]);
        }
        return push(std::move(out), {x}, [this, x, idx = std::move(idx)](Var o) {
            auto& dx = mgrad(x);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                dx.row(idx[r]) += grad(o).row(static_cast<Eigen::Index>(r));
            }
        });
    }

    // Places row r of X at row idx[r] of a zero matrix with `rows` rows.
    Var scatter_rows(Var x, std::vector<int> idx, Eigen::Index rows) {
        M out = M::Zero(rows, value(x).cols());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.row(idx[r]) = value(x).row(static_cast<Eigen::Index>(r));
        }
        return push(std::move(out), {x}, [this, x, idx = std::move(idx)](Var o) {
            auto& dx = mgrad(x);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                dx.row(static_cast<Eigen::Index>(r)) += grad(o).row(idx[r]);
            }
        });
    }

    // Scaled dot-product attention over already-projected Q, K, V with
    // `heads` equal column groups. Rows outside every block output zero.
    Var attention(Var q, Var k, Var v, int heads, std::vector<AttentionBlock> blocks) {
        const M& Q = value(q);
        const M& K = value(k);
        const M& V = value(v);
        const Eigen::Index dh = Q.cols() / heads;
        const S scale_factor = S(1) / std::sqrt(S(dh));
        M out = M::Zero(Q.rows(), V.cols());
        std::vector<M> probs;  // per block, per head
        probs.reserve(blocks.size() * static_cast<std::size_t>(heads));
        for (const auto& blk : blocks) {
            const auto nq = static_cast<Eigen::Index>(blk.qseg.size());
            const auto nk = static_cast<Eigen::Index>(blk.kseg.size());
            for (int h = 0; h < heads; ++h) {
                M s = (Q.block(blk.q0, h * dh, nq, dh) * K.block(blk.k0, h * dh, nk, dh).transpose()) * scale_factor;
                masked_softmax(s, blk);
                out.block(blk.q0, h * dh, nq, dh).noalias() += s * V.block(blk.k0, h * dh, nk, dh);
                probs.push_back(std::move(s));
            }
        }
        return push(std::move(out), {q, k, v},
                    [this, q, k, v, heads, dh, scale_factor, blocks = std::move(blocks),
                     probs = std::move(probs)](Var o) {
                        const M& G = grad(o);
                        const M& Q = value(q);
                        const M& K = value(k);
                        const M& V = value(v);
                        std::size_t p_at = 0;
                        for (const auto& blk : blocks) {
                            const auto nq = static_cast<Eigen::Index>(blk.qseg.size());
                            const auto nk = static_cast<Eigen::Index>(blk.kseg.size());
                            for (int h = 0; h < heads; ++h) {
                                const M& P = probs[p_at++];
                                const auto g = G.block(blk.q0, h * dh, nq, dh);
                                if (needs_grad(v)) {
                                    mgrad(v).block(blk.k0, h * dh, nk, dh).noalias() += P.transpose() * g;
                                }
                                if (!needs_grad(q) && !needs_grad(k)) {
                                    continue;
                                }
                                M dp = g * V.block(blk.k0, h * dh, nk, dh).transpose();
                                const Eigen::Matrix<S, Eigen::Dynamic, 1> row_dot = dp.cwiseProduct(P).rowwise().sum();
                                dp.colwise() -= row_dot;
                                M ds = P.cwiseProduct(dp) * scale_factor;
                                if (needs_grad(q)) {
                                    mgrad(q).block(blk.q0, h * dh, nq, dh).noalias() +=
                                        ds * K.block(blk.k0, h * dh, nk, dh);
                                }
                                if (needs_grad(k)) {
                                    mgrad(k).block(blk.k0, h * dh, nk, dh).noalias() +=
                                        ds.transpose() * Q.block(blk.q0, h * dh, nq, dh);
                                }
                            }
                        }
                    });
    }

    // Slot-attention weights from logits L (N inputs x H slots): a softmax over
    // slots per input plus eps, then each slot column divided by its sum.
    // Rows with valid[i] == false contribute nothing.
    Var slot_weights(Var logits, std::vector<bool> valid, S eps = S(1e-8)) {
        const M& L = value(logits);
        M P = M::Zero(L.rows(), L.cols());
        for (Eigen::Index i = 0; i < L.rows(); ++i) {
            if (!valid[static_cast<std::size_t>(i)]) {
                continue;
            }
            const S mx = L.row(i).maxCoeff();
            P.row(i) = (L.row(i).array() - mx).exp();
            P.row(i) /= P.row(i).sum();
        }
        M A = P;
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            if (valid[static_cast<std::size_t>(i)]) {
                A.row(i).array() += eps;
            }
        }
        const Eigen::Matrix<S, 1, Eigen::Dynamic> colsum = A.colwise().sum();
        M W = A;
        for (Eigen::Index j = 0; j < W.cols(); ++j) {
            W.col(j) /= colsum(j);
        }
        return push(std::move(W), {logits}, [this, logits, P = std::move(P), colsum](Var o) {
            const M& G = grad(o);
            const M& W = value(o);
            // dA_ij = (dW_ij - sum_k dW_kj W_kj) / c_j
            const Eigen::Matrix<S, 1, Eigen::Dynamic> coupled = G.cwiseProduct(W).colwise().sum();
            M dA = G;
            dA.rowwise() -= coupled;
            for (Eigen::Index j = 0; j < dA.cols(); ++j) {
                dA.col(j) /= colsum(j);
            }
            const Eigen::Matrix<S, Eigen::Dynamic, 1> row_dot = dA.cwiseProduct(P).rowwise().sum();
            dA.colwise() -= row_dot;
            mgrad(logits) += P.cwiseProduct(dA);
        });
    }

    // Mean cross-entropy over selection items with scores h . e / sqrt(D).
    // Per-item scores are kept for accuracy bookkeeping.
    Var select_xent(Var h, Var e, std::vector<SelectItem> items, std::vector<std::vector<S>>* scores_out = nullptr) {
        const M& H = value(h);
        const M& E = value(e);
        const S inv = S(1) / std::sqrt(S(H.cols()));
        std::vector<std::vector<S>> probs(items.size());
        S total = 0;
        for (std::size_t b = 0; b < items.size(); ++b) {
            const auto& it = items[b];
            if (it.rows.empty() || it.target < 0 || it.target >= static_cast<int>(it.rows.size())) {
                throw std::invalid_argument("select_xent: target not among the eligible rows");
            }
            std::vector<S> s(it.rows.size());
            for (std::size_t j = 0; j < it.rows.size(); ++j) {
                s[j] = H.row(it.h_row).dot(E.row(it.rows[j])) * inv;
            }
            if (scores_out != nullptr) {
                scores_out->push_back(s);
            }
            S mx = s[0];
            for (S x : s) {
                mx = std::max(mx, x);
            }
            S z = 0;
            for (S& x : s) {
                x = std::exp(x - mx);
                z += x;
            }
            for (S& x : s) {
                x /= z;
            }
            total -= std::log(s[static_cast<std::size_t>(it.target)]);
            probs[b] = std::move(s);
        }
        const S n = S(items.size());
        M out(1, 1);
        out(0, 0) = total / n;
        return push(std::move(out), {h, e}, [this, h, e, inv, n, items = std::move(items), probs = std::move(probs)](Var o) {
            const S g = grad(o)(0, 0) / n;
            for (std::size_t b = 0; b < items.size(); ++b) {
                const auto& it = items[b];
                for (std::size_t j = 0; j < it.rows.size(); ++j) {
                    const S coef = g * inv * (probs[b][j] - (static_cast<int>(j) == it.target ? S(1) : S(0)));
                    if (coef == S(0)) {
                        continue;
                    }
                    if (needs_grad(h)) {
                        mgrad(h).row(it.h_row) += coef * value(e).row(it.rows[j]);
                    }
                    if (needs_grad(e)) {
                        mgrad(e).row(it.rows[j]) += coef * value(h).row(it.h_row);
                    }
                }
            }
        });
    }

private:
    struct Node {
        M value;
        M grad;
        bool needs_grad = false;
        std::function<void()> back;
    };

    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
    M& mgrad(Var v) { return node(v).grad; }

    template <class F>
    Var push(M value, std::initializer_list<Var> inputs, F&& back) {
        return push(std::move(value), std::vector<Var>(inputs), std::forward<F>(back));
    }

    template <class F>
    Var push(M value, const std::vector<Var>& inputs, F&& back) {
        bool any = false;
        for (Var in : inputs) {
            any = any || (in.valid() && needs_grad(in));
        }
        const Var out = leaf(std::move(value), any);
        if (any) {
            node(out).back = [out, fn = std::forward<F>(back)]() { fn(out); };
        }
        return out;
    }

    static void masked_softmax(M& s, const AttentionBlock& blk) {
        const S neg_inf = -std::numeric_limits<S>::infinity();
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const int qs = blk.qseg[static_cast<std::size_t>(i)];
            S mx = neg_inf;
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                const int ks = blk.kseg[static_cast<std::size_t>(j)];
                const bool visible = qs >= 0 && ks >= 0 && (!blk.causal || ks <= qs);
                if (!visible) {
                    s(i, j) = neg_inf;
                } else {
                    mx = std::max(mx, s(i, j));
                }
            }
            if (mx == neg_inf) {
                s.row(i).setZero();
                continue;
            }
            S z = 0;
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                const S p = s(i, j) == neg_inf ? S(0) : std::exp(s(i, j) - mx);
                s(i, j) = p;
                z += p;
            }
            s.row(i) /= z;
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace ttp::ad
