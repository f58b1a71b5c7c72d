#ifndef FEDRIR_TENSOR_HPP
#define FEDRIR_TENSOR_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedrir/rng.hpp"

namespace fedrir {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

class TensorError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class NumericError : public TensorError {
  public:
    using TensorError::TensorError;
};

// Named flat parameter arrays in insertion order. The manifest (names plus
// shapes) is the unit of compatibility for gradients, Adam state,
// aggregation and checkpoints.
template <class S>
class ParameterSet {
  public:
    void add(const std::string& name, Mat<S> value) {
        if (index_.count(name))
            throw TensorError("duplicate parameter name: " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        values_.push_back(std::move(value));
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Mat<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw TensorError("unknown parameter: " + name);
        return values_[it->second];
    }
    const Mat<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw TensorError("unknown parameter: " + name);
        return values_[it->second];
    }

    std::size_t size() const { return names_.size(); }
    bool empty() const { return names_.empty(); }
    const std::vector<std::string>& names() const { return names_; }
    const Mat<S>& value(std::size_t i) const { return values_[i]; }
    Mat<S>& value(std::size_t i) { return values_[i]; }

    bool same_manifest(const ParameterSet& o) const {
        if (names_ != o.names_) return false;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (values_[i].rows() != o.values_[i].rows() ||
                values_[i].cols() != o.values_[i].cols())
                return false;
        }
        return true;
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    ParameterSet zeros_like() const {
        ParameterSet z;
        for (std::size_t i = 0; i < names_.size(); ++i)
            z.add(names_[i], Mat<S>::Zero(values_[i].rows(), values_[i].cols()));
        return z;
    }

    void merge(const ParameterSet& o) {
        for (std::size_t i = 0; i < o.size(); ++i) add(o.names()[i], o.value(i));
    }

    bool operator==(const ParameterSet& o) const {
        if (!same_manifest(o)) return false;
        for (std::size_t i = 0; i < values_.size(); ++i)
            if (values_[i] != o.values_[i]) return false;
        return true;
    }

  private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Mat<S>> values_;
};

// Dynamic reverse-mode tape over dense matrices. Nodes are appended in
// evaluation order, so the record is topologically sorted by construction;
// backward replays it in reverse.
template <class S>
class Tape {
  public:
    struct Var {
        std::size_t id = static_cast<std::size_t>(-1);
        bool valid() const { return id != static_cast<std::size_t>(-1); }
    };

    Var constant(Mat<S> v) { return push(std::move(v), false, {}); }
    Var param(Mat<S> v) { return push(std::move(v), true, {}); }

    const Mat<S>& value(Var v) const { return nodes_[v.id].value; }
    const Mat<S>& grad(Var v) const { return nodes_[v.id].grad; }
    std::size_t size() const { return nodes_.size(); }

    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.cols() != B.rows())
            throw TensorError("matmul: inner dimensions differ (" +
                              shape_str(A) + " x " + shape_str(B) + ")");
        Var out = push(A * B, false, [this, a, b](const Mat<S>& g) {
            acc(a, g * val(b).transpose());
            acc(b, val(a).transpose() * g);
        });
        return out;
    }

    Var add(Var a, Var b) {
        require_same_shape(a, b, "add");
        return push(val(a) + val(b), false, [this, a, b](const Mat<S>& g) {
            acc(a, g);
            acc(b, g);
        });
    }

    // batch (rows) plus a 1 x cols bias row
    Var add_rowvec(Var a, Var bias) {
        const auto& A = val(a);
        const auto& B = val(bias);
        if (B.rows() != 1 || B.cols() != A.cols())
            throw TensorError("add_rowvec: bias must be 1 x " +
                              std::to_string(A.cols()));
        Mat<S> out = A;
        out.rowwise() += B.row(0);
        return push(std::move(out), false, [this, a, bias](const Mat<S>& g) {
            acc(a, g);
            acc(bias, g.colwise().sum());
        });
    }

    Var sub(Var a, Var b) {
        require_same_shape(a, b, "sub");
        return push(val(a) - val(b), false, [this, a, b](const Mat<S>& g) {
            acc(a, g);
            acc(b, -g);
        });
    }

    Var mul(Var a, Var b) {
        require_same_shape(a, b, "mul");
        return push(val(a).cwiseProduct(val(b)), false,
                    [this, a, b](const Mat<S>& g) {
                        acc(a, g.cwiseProduct(val(b)));
                        acc(b, g.cwiseProduct(val(a)));
                    });
    }

    Var scale(Var a, S c) {
        return push(val(a) * c, false,
                    [this, a, c](const Mat<S>& g) { acc(a, g * c); });
    }

    Var add_scalar(Var a, S c) {
        return push(val(a).array() + c, false,
                    [this, a](const Mat<S>& g) { acc(a, g); });
    }

    Var relu(Var a) {
        return push(val(a).cwiseMax(S(0)), false, [this, a](const Mat<S>& g) {
            acc(a, (val(a).array() > S(0)).template cast<S>().matrix()
                       .cwiseProduct(g));
        });
    }

    Var exp(Var a) {
        Var out = push(val(a).array().exp(), false, {});
        nodes_[out.id].back = [this, a, out](const Mat<S>& g) {
            acc(a, g.cwiseProduct(val(out)));
        };
        return out;
    }

    Var log(Var a) {
        return push(val(a).array().log(), false, [this, a](const Mat<S>& g) {
            acc(a, g.cwiseQuotient(val(a)));
        });
    }

    // gradient 1 strictly inside [lo, hi], 0 outside
    Var clamp(Var a, S lo, S hi) {
        return push(val(a).cwiseMax(lo).cwiseMin(hi), false,
                    [this, a, lo, hi](const Mat<S>& g) {
                        Mat<S> inside =
                            ((val(a).array() >= lo) && (val(a).array() <= hi))
                                .template cast<S>();
                        acc(a, g.cwiseProduct(inside));
                    });
    }

    Var concat_cols(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rows() != B.rows())
            throw TensorError("concat_cols: row counts differ");
        Mat<S> out(A.rows(), A.cols() + B.cols());
        out << A, B;
        const auto ac = A.cols();
        return push(std::move(out), false, [this, a, b, ac](const Mat<S>& g) {
            acc(a, g.leftCols(ac));
            acc(b, g.rightCols(g.cols() - ac));
        });
    }

    Var permute_rows(Var a, std::vector<int> perm) {
        const auto& A = val(a);
        if (static_cast<Eigen::Index>(perm.size()) != A.rows())
            throw TensorError("permute_rows: permutation length mismatch");
        Mat<S> out(A.rows(), A.cols());
        for (Eigen::Index i = 0; i < A.rows(); ++i) out.row(i) = A.row(perm[i]);
        return push(std::move(out), false,
                    [this, a, perm = std::move(perm)](const Mat<S>& g) {
                        Mat<S> ga = Mat<S>::Zero(g.rows(), g.cols());
                        for (Eigen::Index i = 0; i < g.rows(); ++i)
                            ga.row(perm[i]) += g.row(i);
                        acc(a, ga);
                    });
    }

    Var sum(Var a) {
        Mat<S> out(1, 1);
        out(0, 0) = val(a).sum();
        return push(std::move(out), false, [this, a](const Mat<S>& g) {
            acc(a, Mat<S>::Constant(val(a).rows(), val(a).cols(), g(0, 0)));
        });
    }

    Var mean(Var a) {
        const S n = static_cast<S>(val(a).size());
        Mat<S> out(1, 1);
        out(0, 0) = val(a).sum() / n;
        return push(std::move(out), false, [this, a, n](const Mat<S>& g) {
            acc(a, Mat<S>::Constant(val(a).rows(), val(a).cols(), g(0, 0) / n));
        });
    }

    // mean over all elements of (a - b)^2
    Var squared_error(Var a, Var b) {
        require_same_shape(a, b, "squared_error");
        const S n = static_cast<S>(val(a).size());
        Mat<S> out(1, 1);
        out(0, 0) = (val(a) - val(b)).squaredNorm() / n;
        return push(std::move(out), false, [this, a, b, n](const Mat<S>& g) {
            Mat<S> d = (val(a) - val(b)) * (S(2) / n * g(0, 0));
            acc(a, d);
            acc(b, -d);
        });
    }

    // fused, numerically stable; mean over the batch (rows)
    Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
        const auto& L = val(logits);
        if (static_cast<Eigen::Index>(labels.size()) != L.rows())
            throw TensorError("softmax_cross_entropy: label count mismatch");
        const int C = static_cast<int>(L.cols());
        for (int y : labels)
            if (y < 0 || y >= C)
                throw TensorError("softmax_cross_entropy: label out of range [0," +
                                  std::to_string(C) + ")");
        const S B = static_cast<S>(L.rows());
        Mat<S> probs(L.rows(), L.cols());
        S total = S(0);
        for (Eigen::Index i = 0; i < L.rows(); ++i) {
            const S m = L.row(i).maxCoeff();
            Eigen::Array<S, 1, Eigen::Dynamic> e = (L.row(i).array() - m).exp();
            const S z = e.sum();
            probs.row(i) = (e / z).matrix();
            total += std::log(z) + m - L(i, labels[i]);
        }
        Mat<S> out(1, 1);
        out(0, 0) = total / B;
        return push(std::move(out), false,
                    [this, logits, labels, probs = std::move(probs), B](
                        const Mat<S>& g) {
                        Mat<S> d = probs;
                        for (Eigen::Index i = 0; i < d.rows(); ++i)
                            d(i, labels[i]) -= S(1);
                        acc(logits, d * (g(0, 0) / B));
                    });
    }

    // mean over the batch of the per-row diagonal-Gaussian log density of
    // `target` under (mu, logvar)
    Var gauss_log_density(Var target, Var mu, Var logvar) {
        require_same_shape(target, mu, "gauss_log_density");
        require_same_shape(target, logvar, "gauss_log_density");
        const auto& T = val(target);
        const auto& M = val(mu);
        const auto& V = val(logvar);
        const S B = static_cast<S>(T.rows());
        const S log2pi = static_cast<S>(std::log(2.0 * std::numbers::pi));
        Mat<S> invvar = (-V.array()).exp();
        Mat<S> diff = T - M;
        const S total =
            S(-0.5) *
            (V.array() + log2pi + diff.array().square() * invvar.array()).sum();
        Mat<S> out(1, 1);
        out(0, 0) = total / B;
        return push(std::move(out), false,
                    [this, target, mu, logvar, diff = std::move(diff),
                     invvar = std::move(invvar), B](const Mat<S>& g) {
                        const S c = g(0, 0) / B;
                        Mat<S> dmu = diff.cwiseProduct(invvar) * c;
                        acc(mu, dmu);
                        acc(target, -dmu);
                        acc(logvar,
                            ((diff.array().square() * invvar.array() - S(1)) *
                             S(0.5) * c)
                                .matrix());
                    });
    }

    // Runs the reverse sweep from a 1x1 output. Gradients of untouched
    // nodes stay exactly zero.
    void backward(Var out) {
        const auto& o = val(out);
        if (o.rows() != 1 || o.cols() != 1)
            throw TensorError("backward: output must be a scalar (1x1)");
        for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
        nodes_[out.id].grad(0, 0) = S(1);
        for (std::size_t i = out.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.back && n.grad.size() > 0 && !n.grad.isZero(S(0)))
                n.back(n.grad);
        }
        for (const auto& n : nodes_) {
            if (n.trainable && !n.grad.allFinite())
                throw NumericError("backward produced a non-finite gradient");
        }
    }

  private:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        std::function<void(const Mat<S>&)> back;
        bool trainable = false;
    };

    const Mat<S>& val(Var v) const { return nodes_[v.id].value; }

    void acc(Var v, const Mat<S>& g) { nodes_[v.id].grad += g; }

    Var push(Mat<S> value, bool trainable,
             std::function<void(const Mat<S>&)> back) {
        if (!value.allFinite())
            throw NumericError("non-finite value in forward pass");
        Node n;
        n.value = std::move(value);
        n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
        n.back = std::move(back);
        n.trainable = trainable;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    void require_same_shape(Var a, Var b, const char* op) const {
        if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
            throw TensorError(std::string(op) + ": shape mismatch (" +
                              shape_str(val(a)) + " vs " + shape_str(val(b)) + ")");
    }

    static std::string shape_str(const Mat<S>& m) {
        return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Adam

template <class S>
struct AdamState {
    ParameterSet<S> m;
    ParameterSet<S> v;
    int64_t t = 0;
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);

    static AdamState zeros_like(const ParameterSet<S>& params) {
        AdamState st;
        st.m = params.zeros_like();
        st.v = params.zeros_like();
        return st;
    }
};

// Standard bias-corrected Adam; returns new values, inputs untouched.
template <class S>
std::pair<ParameterSet<S>, AdamState<S>> adam_step(const ParameterSet<S>& params,
                                                   const ParameterSet<S>& grads,
                                                   const AdamState<S>& state,
                                                   S lr) {
    if (!params.same_manifest(grads) || !params.same_manifest(state.m) ||
        !params.same_manifest(state.v))
        throw TensorError("adam_step: manifest mismatch");
    ParameterSet<S> out = params;
    AdamState<S> st = state;
    st.t += 1;
    const S bc1 = S(1) - std::pow(st.beta1, static_cast<S>(st.t));
    const S bc2 = S(1) - std::pow(st.beta2, static_cast<S>(st.t));
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Mat<S>& g = grads.value(i);
        Mat<S>& m = st.m.value(i);
        Mat<S>& v = st.v.value(i);
        m = st.beta1 * m + (S(1) - st.beta1) * g;
        v = st.beta2 * v + (S(1) - st.beta2) * g.cwiseProduct(g);
        out.value(i) -=
            (lr * (m / bc1).array() / ((v / bc2).array().sqrt() + st.eps))
                .matrix();
    }
    return {std::move(out), std::move(st)};
}

// In-place convenience used by the training loops.
template <class S>
void adam_step_inplace(ParameterSet<S>& params, const ParameterSet<S>& grads,
                       AdamState<S>& state, S lr) {
    auto [p, st] = adam_step(params, grads, state, lr);
    params = std::move(p);
    state = std::move(st);
}

// ---------------------------------------------------------------------------
// Finite differences (independent oracle, also exposed by the gradcheck CLI)

// Central-difference gradient of a scalar function of a ParameterSet.
template <class S>
ParameterSet<S> finite_difference_gradient(
    const std::function<S(const ParameterSet<S>&)>& f,
    const ParameterSet<S>& params, S h) {
    if (!(h > S(0))) throw TensorError("finite_difference_gradient: h must be > 0");
    ParameterSet<S> grad = params.zeros_like();
    ParameterSet<S> work = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat<S>& w = work.value(i);
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const S orig = w(j);
            w(j) = orig + h;
            const S fp = f(work);
            w(j) = orig - h;
            const S fm = f(work);
            w(j) = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_difference_gradient: non-finite f");
            grad.value(i)(j) = (fp - fm) / (S(2) * h);
        }
    }
    return grad;
}

// Relative-error comparison used by the gradient checks: |a-b| scaled by the
// larger magnitude with a small absolute floor.
template <class S>
S max_relative_error(const ParameterSet<S>& a, const ParameterSet<S>& b) {
    if (!a.same_manifest(b)) throw TensorError("max_relative_error: manifest mismatch");
    S worst = S(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Mat<S>& x = a.value(i);
        const Mat<S>& y = b.value(i);
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const S denom = std::max({std::abs(x(j)), std::abs(y(j)), S(1e-6)});
            worst = std::max(worst, std::abs(x(j) - y(j)) / denom);
        }
    }
    return worst;
}

// Gaussian init helper (values drawn row-major for layout-independent
// reproducibility).
template <class S>
Mat<S> random_normal(Eigen::Index rows, Eigen::Index cols, RngStream& rng,
                     double stddev = 1.0) {
    Mat<S> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<S>(rng.normal() * stddev);
    return m;
}

}  // namespace fedrir

#endif  // FEDRIR_TENSOR_HPP
