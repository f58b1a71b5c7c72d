#ifndef FEDRIR_GRADCHECK_HPP
#define FEDRIR_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "fedrir/learning.hpp"

namespace fedrir {

struct GradCheckResult {
    std::string loss;
    double max_rel_err = 0.0;
};

namespace detail {

// Compares reverse-mode gradients against central finite differences for a
// loss expressed as a tape builder over one combined ParameterSet.
// When a +-h probe straddles a kink (relu or clamp boundary) the central
// difference picks up a spurious term of magnitude J*(h-d)/(2h) where J is
// the slope jump and d the crossing offset; the second difference measures
// exactly J*(h-d), so sec/(2h) bounds the kink-induced error of a single
// crossing and is subtracted from the discrepancy. Simultaneous crossings
// can cancel in the second difference while their errors add, so each
// coordinate is probed at two step sizes and the cleaner probe wins: a
// kink between the two steps only corrupts the larger probe.
inline double check_one(
    const ParameterSet<double>& params,
    const std::function<Tape<double>::Var(Tape<double>&, const BoundParams<double>&)>& build,
    double h, double corrupt = 0.0) {
    Tape<double> tape;
    auto bound = BoundParams<double>::bind(tape, params, true);
    auto loss = build(tape, bound);
    tape.backward(loss);
    ParameterSet<double> autodiff = bound.grads(tape);

    auto eval = [&](const ParameterSet<double>& p) {
        Tape<double> t;
        auto b = BoundParams<double>::bind(t, p, false);
        return t.value(build(t, b))(0, 0);
    };
    const double f0 = eval(params);
    ParameterSet<double> work = params;
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Mat<double>& w = work.value(i);
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const double orig = w(j);
            const double ad = autodiff.value(i)(j) * (1.0 + corrupt);
            double best = std::numeric_limits<double>::infinity();
            for (const double step : {h, h / 8.0}) {
                w(j) = orig + step;
                const double fp = eval(work);
                w(j) = orig - step;
                const double fm = eval(work);
                w(j) = orig;
                if (!std::isfinite(fp) || !std::isfinite(fm))
                    throw NumericError("gradcheck: non-finite loss probe");
                const double kink_err =
                    std::abs(fp - 2.0 * f0 + fm) / (2.0 * step);
                const double fd = (fp - fm) / (2.0 * step);
                const double excess =
                    std::max(0.0, std::abs(ad - fd) - kink_err);
                const double denom = std::max({std::abs(ad), std::abs(fd), 1e-5});
                best = std::min(best, excess / denom);
            }
            worst = std::max(worst, best);
        }
    }
    return worst;
}

}  // namespace detail

// Every FedRIR loss on random miniature models: reconstruction, the
// positive and negative vCLUB terms, classification, and the joint
// objective. Returns the per-loss worst relative error over `instances`
// random cases.
// `corrupt` is a harness-sanity fixture: it scales every reverse-mode
// gradient by (1 + corrupt) before the comparison, so a nonzero value must
// make the check fail.
inline std::vector<GradCheckResult> run_gradcheck(uint64_t seed,
                                                  int instances = 20,
                                                  double h = 1e-5,
                                                  double corrupt = 0.0) {
    ModelDims dims;
    dims.input = 6;
    dims.k_cs = 3;
    dims.k_g = 3;
    dims.classes = 3;
    dims.hidden = {8};
    dims.idm_hidden = {6, 6};
    const int batch = 4;

    std::vector<GradCheckResult> results = {
        {"recon", 0.0}, {"id_positive", 0.0}, {"id_negative", 0.0},
        {"cls", 0.0},   {"joint", 0.0},
    };

    for (int inst = 0; inst < instances; ++inst) {
        RngStream rng = RngStream::derive(seed, "gradcheck", static_cast<uint64_t>(inst));
        ClientModels<double> m(dims);
        RngStream shared = RngStream::derive(seed, "gradcheck.shared", static_cast<uint64_t>(inst));
        m.init(rng, shared);
        // jitter every tensor (biases included): zero biases let a fully
        // dead relu row collapse an encoder output to exactly 0, parking
        // whole layers on their kinks
        for (ParameterSet<double>* ps : {&m.fcs, &m.gen, &m.fg, &m.head, &m.idm})
            for (std::size_t i = 0; i < ps->size(); ++i)
                for (Eigen::Index j = 0; j < ps->value(i).size(); ++j)
                    ps->value(i)(j) += 0.05 * rng.normal();

        // interior of [0,1]: exact zeros (as clamping would produce) can
        // land every generator preactivation on a relu kink at once
        Mat<double> x(batch, dims.input);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c)
                x(r, c) = rng.uniform(0.05, 0.95);
        std::vector<int> labels(batch);
        for (auto& y : labels) y = static_cast<int>(rng.uniform_int(dims.classes));
        MaskSpec mask_spec{0.5, MaskMode::kElementwise, 1};
        auto [x_masked, mask] = mask_input<double>(x, mask_spec, rng);
        const Mat<double> f_cs = m.fcs_net.eval(m.fcs, x);
        std::vector<int> perm = rng.permutation(batch);

        auto update = [&](const char* name, double err) {
            for (auto& r : results)
                if (r.loss == name) r.max_rel_err = std::max(r.max_rel_err, err);
        };

        {
            ParameterSet<double> p = m.fcs;
            p.merge(m.gen);
            update("recon", detail::check_one(
                p,
                [&](Tape<double>& t, const BoundParams<double>& b) {
                    auto fc = m.fcs_net.forward(t, b, t.constant(x_masked));
                    return t.squared_error(m.gen_net.forward(t, b, fc),
                                           t.constant(x));
                },
                h, corrupt));
        }
        {
            ParameterSet<double> p = m.fg;
            p.merge(m.idm);
            update("id_positive", detail::check_one(
                p,
                [&](Tape<double>& t, const BoundParams<double>& b) {
                    auto fg = m.fg_net.forward(t, b, t.constant(x));
                    auto [mu, lv] = m.idm_net.forward(t, b, t.constant(f_cs));
                    return t.gauss_log_density(fg, mu, lv);
                },
                h, corrupt));
            update("id_negative", detail::check_one(
                p,
                [&](Tape<double>& t, const BoundParams<double>& b) {
                    auto fg = m.fg_net.forward(t, b, t.constant(x));
                    auto [mu, lv] = m.idm_net.forward(t, b, t.constant(f_cs));
                    return t.gauss_log_density(t.permute_rows(fg, perm), mu, lv);
                },
                h, corrupt));
        }
        {
            ParameterSet<double> p = m.fg;
            p.merge(m.head);
            update("cls", detail::check_one(
                p,
                [&](Tape<double>& t, const BoundParams<double>& b) {
                    auto fg = m.fg_net.forward(t, b, t.constant(x));
                    auto logits = m.head_net.forward(
                        t, b, t.concat_cols(fg, t.constant(f_cs)));
                    return t.softmax_cross_entropy(logits, labels);
                },
                h, corrupt));
        }
        {
            ParameterSet<double> p = m.fg;
            p.merge(m.head);
            p.merge(m.idm);
            update("joint", detail::check_one(
                p,
                [&](Tape<double>& t, const BoundParams<double>& b) {
                    auto fg = m.fg_net.forward(t, b, t.constant(x));
                    auto [mu, lv] = m.idm_net.forward(t, b, t.constant(f_cs));
                    auto l_id = t.sub(
                        t.gauss_log_density(fg, mu, lv),
                        t.gauss_log_density(t.permute_rows(fg, perm), mu, lv));
                    auto logits = m.head_net.forward(
                        t, b, t.concat_cols(fg, t.constant(f_cs)));
                    return t.add(l_id, t.softmax_cross_entropy(logits, labels));
                },
                h, corrupt));
        }
    }
    return results;
}

}  // namespace fedrir

#endif  // FEDRIR_GRADCHECK_HPP
