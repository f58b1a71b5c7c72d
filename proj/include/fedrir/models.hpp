#ifndef FEDRIR_MODELS_HPP
#define FEDRIR_MODELS_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "fedrir/tensor.hpp"

namespace fedrir {

// Tape bindings for one ParameterSet; created per evaluation.
template <class S>
struct BoundParams {
    std::vector<std::string> names;
    std::unordered_map<std::string, typename Tape<S>::Var> vars;

    static BoundParams bind(Tape<S>& tape, const ParameterSet<S>& params,
                            bool trainable) {
        BoundParams b;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& name = params.names()[i];
            b.names.push_back(name);
            b.vars[name] = trainable ? tape.param(params.value(i))
                                     : tape.constant(params.value(i));
        }
        return b;
    }

    typename Tape<S>::Var at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw TensorError("unbound parameter: " + name);
        return it->second;
    }

    // gradients with the same manifest as the bound set
    ParameterSet<S> grads(const Tape<S>& tape) const {
        ParameterSet<S> g;
        for (const auto& name : names) g.add(name, tape.grad(vars.at(name)));
        return g;
    }
};

// Fully connected stack: weights "<prefix>.w<l>" (in x out) and biases
// "<prefix>.b<l>" (1 x out), relu between layers, output linear unless
// relu_output.
template <class S>
struct Mlp {
    std::string prefix;
    std::vector<int> dims;
    bool relu_output = false;

    int layers() const { return static_cast<int>(dims.size()) - 1; }
    int in_dim() const { return dims.front(); }
    int out_dim() const { return dims.back(); }

    // He initialization for the relu stacks
    ParameterSet<S> init(RngStream& rng) const {
        ParameterSet<S> p;
        for (int l = 0; l < layers(); ++l) {
            const double stddev = std::sqrt(2.0 / dims[l]);
            p.add(prefix + ".w" + std::to_string(l),
                  random_normal<S>(dims[l], dims[l + 1], rng, stddev));
            p.add(prefix + ".b" + std::to_string(l),
                  Mat<S>::Zero(1, dims[l + 1]));
        }
        return p;
    }

    typename Tape<S>::Var forward(Tape<S>& tape, const BoundParams<S>& p,
                                  typename Tape<S>::Var x) const {
        auto h = x;
        for (int l = 0; l < layers(); ++l) {
            h = tape.add_rowvec(tape.matmul(h, p.at(prefix + ".w" + std::to_string(l))),
                                p.at(prefix + ".b" + std::to_string(l)));
            if (l + 1 < layers() || relu_output) h = tape.relu(h);
        }
        return h;
    }

    // value-level forward (no gradients)
    Mat<S> eval(const ParameterSet<S>& params, const Mat<S>& x) const {
        Tape<S> tape;
        auto p = BoundParams<S>::bind(tape, params, false);
        return tape.value(forward(tape, p, tape.constant(x)));
    }
};

// Dimensions of every model component in one experiment.
struct ModelDims {
    int input = 64;
    int k_cs = 32;
    int k_g = 32;
    int classes = 10;
    std::vector<int> hidden = {128, 128};
    std::vector<int> idm_hidden = {64, 64, 64, 64};
};

namespace nets {

inline std::vector<int> chain(int in, const std::vector<int>& mid, int out) {
    std::vector<int> d;
    d.push_back(in);
    d.insert(d.end(), mid.begin(), mid.end());
    d.push_back(out);
    return d;
}

template <class S>
Mlp<S> client_specific_encoder(const ModelDims& m) {
    return {"fcs", chain(m.input, m.hidden, m.k_cs), false};
}

template <class S>
Mlp<S> generator(const ModelDims& m) {
    std::vector<int> rev(m.hidden.rbegin(), m.hidden.rend());
    return {"gen", chain(m.k_cs, rev, m.input), false};
}

template <class S>
Mlp<S> global_encoder(const ModelDims& m) {
    return {"fg", chain(m.input, m.hidden, m.k_g), false};
}

// single FC layer over the concatenated [f_g, f_cs] features
template <class S>
Mlp<S> classification_head(const ModelDims& m) {
    return {"head", {m.k_g + m.k_cs, m.classes}, false};
}

// head used by the single-model baseline (global features only)
template <class S>
Mlp<S> baseline_head(const ModelDims& m) {
    return {"avghead", {m.k_g, m.classes}, false};
}

}  // namespace nets

// Bounds on the distiller's log-variance. The floor keeps the conditional
// density's gradients on the same scale as the other losses: an unbounded
// fit can shrink sigma^2 by orders of magnitude and the resulting 1/sigma^2
// factor would drown the classification signal.
inline constexpr double kLogVarMin = -0.5;
inline constexpr double kLogVarMax = 10.0;

// Conditional diagonal Gaussian q(f_g | f_cs): relu trunk plus linear mean
// and log-variance heads; log-variance clamped to [kLogVarMin, kLogVarMax].
template <class S>
struct InfoDistiller {
    Mlp<S> trunk;
    Mlp<S> mu_head;
    Mlp<S> logvar_head;

    explicit InfoDistiller(const ModelDims& m)
        : trunk{"idm.t", nets::chain(m.k_cs, std::vector<int>(m.idm_hidden.begin(), m.idm_hidden.end() - 1), m.idm_hidden.back()), true},
          mu_head{"idm.mu", {m.idm_hidden.back(), m.k_g}, false},
          logvar_head{"idm.lv", {m.idm_hidden.back(), m.k_g}, false} {}

    ParameterSet<S> init(RngStream& rng) const {
        ParameterSet<S> p = trunk.init(rng);
        p.merge(mu_head.init(rng));
        p.merge(logvar_head.init(rng));
        return p;
    }

    std::pair<typename Tape<S>::Var, typename Tape<S>::Var> forward(
        Tape<S>& tape, const BoundParams<S>& p,
        typename Tape<S>::Var f_cs) const {
        auto h = trunk.forward(tape, p, f_cs);
        auto mu = mu_head.forward(tape, p, h);
        auto lv = tape.clamp(logvar_head.forward(tape, p, h),
                             S(kLogVarMin), S(kLogVarMax));
        return {mu, lv};
    }
};

}  // namespace fedrir

#endif  // FEDRIR_MODELS_HPP
