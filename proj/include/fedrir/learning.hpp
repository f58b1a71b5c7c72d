#ifndef FEDRIR_LEARNING_HPP
#define FEDRIR_LEARNING_HPP

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedrir/models.hpp"
#include "fedrir/tensor.hpp"

namespace fedrir {

// ---------------------------------------------------------------------------
// Input masking

enum class MaskMode { kElementwise, kPatch };

struct MaskSpec {
    double ratio = 0.6;  // in [0, 1)
    MaskMode mode = MaskMode::kElementwise;
    int patch_edge = 4;  // patch mode only
};

// Zeroes exactly round(ratio * d) coordinates per sample (elementwise mode)
// or round(ratio * n_patches) patches (patch mode); a fresh mask is drawn
// per sample per call. Returns (x_masked, keep-indicator).
template <class S>
std::pair<Mat<S>, Mat<S>> mask_input(const Mat<S>& x, const MaskSpec& spec,
                                     RngStream& rng) {
    if (spec.ratio < 0.0 || spec.ratio >= 1.0)
        throw TensorError("mask ratio must be in [0, 1)");
    const Eigen::Index d = x.cols();
    Mat<S> mask = Mat<S>::Ones(x.rows(), d);
    if (spec.mode == MaskMode::kElementwise) {
        const int n_mask = static_cast<int>(std::llround(spec.ratio * static_cast<double>(d)));
        std::vector<int> idx(static_cast<std::size_t>(d));
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            for (Eigen::Index j = 0; j < d; ++j) idx[static_cast<std::size_t>(j)] = static_cast<int>(j);
            // partial Fisher-Yates: first n_mask entries are the masked set
            for (int j = 0; j < n_mask; ++j) {
                const auto k = j + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(d - j)));
                std::swap(idx[j], idx[k]);
                mask(r, idx[j]) = S(0);
            }
        }
    } else {
        const int side = static_cast<int>(std::llround(std::sqrt(static_cast<double>(d))));
        if (static_cast<Eigen::Index>(side) * side != d)
            throw TensorError("patch masking requires square inputs, got d=" +
                              std::to_string(d));
        if (spec.patch_edge <= 0 || side % spec.patch_edge != 0)
            throw TensorError("patch edge " + std::to_string(spec.patch_edge) +
                              " does not tile a " + std::to_string(side) + "x" +
                              std::to_string(side) + " input");
        const int per_side = side / spec.patch_edge;
        const int n_patches = per_side * per_side;
        const int n_mask = static_cast<int>(std::llround(spec.ratio * n_patches));
        std::vector<int> idx(n_patches);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            for (int j = 0; j < n_patches; ++j) idx[j] = j;
            for (int j = 0; j < n_mask; ++j) {
                const auto k = j + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_patches - j)));
                std::swap(idx[j], idx[k]);
                const int pr = idx[j] / per_side, pc = idx[j] % per_side;
                for (int a = 0; a < spec.patch_edge; ++a)
                    for (int b = 0; b < spec.patch_edge; ++b)
                        mask(r, (pr * spec.patch_edge + a) * side +
                                    pc * spec.patch_edge + b) = S(0);
            }
        }
    }
    return {x.cwiseProduct(mask), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Value-level losses (the tape builders live in the update functions)

// mean over the batch of per-sample mean squared error
template <class S>
S recon_loss(const Mat<S>& x_hat, const Mat<S>& x) {
    if (x_hat.rows() != x.rows() || x_hat.cols() != x.cols())
        throw TensorError("recon_loss: shape mismatch");
    return (x_hat - x).squaredNorm() / static_cast<S>(x.size());
}

template <class S>
S cls_loss(const Mat<S>& logits, const std::vector<int>& labels) {
    Tape<S> tape;
    return tape.value(tape.softmax_cross_entropy(tape.constant(logits), labels))(0, 0);
}

// mean over the batch of log q(f_g | f_cs) under the distiller's Gaussian
template <class S>
S idm_loglik(const InfoDistiller<S>& idm, const ParameterSet<S>& idm_params,
             const Mat<S>& f_cs, const Mat<S>& f_g) {
    if (f_cs.rows() != f_g.rows())
        throw TensorError("idm_loglik: batch sizes differ");
    Tape<S> tape;
    auto p = BoundParams<S>::bind(tape, idm_params, false);
    auto [mu, lv] = idm.forward(tape, p, tape.constant(f_cs));
    return tape.value(tape.gauss_log_density(tape.constant(f_g), mu, lv))(0, 0);
}

// vCLUB: positive-pair mean log-density minus the same under one uniform
// random permutation of the batch (self-pairs permitted).
template <class S>
S vclub_estimate(const InfoDistiller<S>& idm, const ParameterSet<S>& idm_params,
                 const Mat<S>& f_cs, const Mat<S>& f_g,
                 const std::vector<int>& perm) {
    if (f_cs.rows() < 2) throw TensorError("vclub_estimate: needs batch size >= 2");
    Tape<S> tape;
    auto p = BoundParams<S>::bind(tape, idm_params, false);
    auto [mu, lv] = idm.forward(tape, p, tape.constant(f_cs));
    auto fg = tape.constant(f_g);
    auto pos = tape.gauss_log_density(fg, mu, lv);
    auto neg = tape.gauss_log_density(tape.permute_rows(fg, perm), mu, lv);
    return tape.value(tape.sub(pos, neg))(0, 0);
}

template <class S>
S vclub_estimate(const InfoDistiller<S>& idm, const ParameterSet<S>& idm_params,
                 const Mat<S>& f_cs, const Mat<S>& f_g, RngStream& rng) {
    return vclub_estimate(idm, idm_params, f_cs, f_g,
                          rng.permutation(static_cast<int>(f_cs.rows())));
}

// logits over concat([f_g, f_cs]); the order is fixed for all clients
template <class S>
Mat<S> classify(const Mlp<S>& head, const ParameterSet<S>& head_params,
                const Mat<S>& f_cs, const Mat<S>& f_g) {
    if (f_cs.rows() != f_g.rows())
        throw TensorError("classify: batch sizes differ");
    Mat<S> fp(f_g.rows(), f_g.cols() + f_cs.cols());
    fp << f_g, f_cs;
    return head.eval(head_params, fp);
}

// ---------------------------------------------------------------------------
// Client-side model bundle and the two-stage local update

enum class Ablation { kNone, kR0, kNoMcsl, kNoId };
enum class IdmMode { kAlternating, kJoint };

template <class S>
struct ClientModels {
    ModelDims dims;
    Mlp<S> fcs_net, gen_net, fg_net, head_net;
    InfoDistiller<S> idm_net;

    ParameterSet<S> fcs, gen, fg, head, idm;
    AdamState<S> fcs_opt, gen_opt, fg_opt, head_opt, idm_opt;

    explicit ClientModels(const ModelDims& d)
        : dims(d),
          fcs_net(nets::client_specific_encoder<S>(d)),
          gen_net(nets::generator<S>(d)),
          fg_net(nets::global_encoder<S>(d)),
          head_net(nets::classification_head<S>(d)),
          idm_net(d) {}

    // fg comes from a stream shared by every client so all copies start
    // identical (precondition of aggregation); private parts use the
    // client's own stream.
    void init(RngStream& private_rng, RngStream& shared_rng) {
        fcs = fcs_net.init(private_rng);
        gen = gen_net.init(private_rng);
        head = head_net.init(private_rng);
        idm = idm_net.init(private_rng);
        fg = fg_net.init(shared_rng);
        fcs_opt = AdamState<S>::zeros_like(fcs);
        gen_opt = AdamState<S>::zeros_like(gen);
        fg_opt = AdamState<S>::zeros_like(fg);
        head_opt = AdamState<S>::zeros_like(head);
        idm_opt = AdamState<S>::zeros_like(idm);
    }
};

// MCSL stage: one Adam step on F_cs and G against the reconstruction of the
// full input from its masked version. F_g, H, I untouched.
template <class S>
S local_update_mcsl(ClientModels<S>& m, const Mat<S>& x, const MaskSpec& spec,
                    S lr, RngStream& rng) {
    if (x.rows() == 0) throw TensorError("local_update_mcsl: empty batch");
    auto [x_masked, mask] = mask_input<S>(x, spec, rng);
    Tape<S> tape;
    auto fcs_p = BoundParams<S>::bind(tape, m.fcs, true);
    auto gen_p = BoundParams<S>::bind(tape, m.gen, true);
    auto f_cs = m.fcs_net.forward(tape, fcs_p, tape.constant(x_masked));
    auto x_hat = m.gen_net.forward(tape, gen_p, f_cs);
    auto loss = tape.squared_error(x_hat, tape.constant(x));
    const S loss_value = tape.value(loss)(0, 0);
    tape.backward(loss);
    adam_step_inplace(m.fcs, fcs_p.grads(tape), m.fcs_opt, lr);
    adam_step_inplace(m.gen, gen_p.grads(tape), m.gen_opt, lr);
    return loss_value;
}

struct IdLosses {
    double l_id = std::numeric_limits<double>::quiet_NaN();
    double l_cls = 0.0;
};

// ID stage. F_cs is frozen: f_cs is computed on the unmasked input and
// enters the tape as a constant, so its gradient is exactly zero by
// construction (no_mcsl is the exception and trains F_cs through the
// classification path only).
template <class S>
IdLosses local_update_id(ClientModels<S>& m, const Mat<S>& x,
                         const std::vector<int>& labels, IdmMode mode,
                         Ablation ablation, S lr, RngStream& rng) {
    if (x.rows() == 0) throw TensorError("local_update_id: empty batch");
    const bool train_fcs = ablation == Ablation::kNoMcsl;
    const bool use_id = ablation != Ablation::kNoId;
    const Mat<S> f_cs_frozen = m.fcs_net.eval(m.fcs, x);
    IdLosses out;

    // Alternating step 1: fit the variational density q(f_g | f_cs) on
    // positive pairs (negative log-likelihood descent on I alone).
    if (use_id && mode == IdmMode::kAlternating) {
        Tape<S> tape;
        auto idm_p = BoundParams<S>::bind(tape, m.idm, true);
        auto [mu, lv] = m.idm_net.forward(tape, idm_p, tape.constant(f_cs_frozen));
        auto nll = tape.scale(
            tape.gauss_log_density(tape.constant(m.fg_net.eval(m.fg, x)), mu, lv),
            S(-1));
        tape.backward(nll);
        adam_step_inplace(m.idm, idm_p.grads(tape), m.idm_opt, lr);
    }

    // Main step: F_g and H (plus I in joint mode, plus F_cs under no_mcsl)
    // on L_id + L_cls with unit weights.
    Tape<S> tape;
    auto fg_p = BoundParams<S>::bind(tape, m.fg, true);
    auto head_p = BoundParams<S>::bind(tape, m.head, true);
    const bool idm_trainable = use_id && mode == IdmMode::kJoint;
    std::optional<BoundParams<S>> idm_p;
    if (use_id) idm_p = BoundParams<S>::bind(tape, m.idm, idm_trainable);
    std::optional<BoundParams<S>> fcs_p;
    if (train_fcs) fcs_p = BoundParams<S>::bind(tape, m.fcs, true);

    auto x_in = tape.constant(x);
    auto f_g = m.fg_net.forward(tape, fg_p, x_in);
    auto f_cs_cls = train_fcs ? m.fcs_net.forward(tape, *fcs_p, x_in)
                              : tape.constant(f_cs_frozen);

    typename Tape<S>::Var total;
    auto l_cls = tape.softmax_cross_entropy(
        m.head_net.forward(tape, head_p, tape.concat_cols(f_g, f_cs_cls)), labels);
    out.l_cls = static_cast<double>(tape.value(l_cls)(0, 0));
    if (use_id) {
        // the distiller conditions on the frozen features even under no_mcsl
        auto [mu, lv] = m.idm_net.forward(tape, *idm_p, tape.constant(f_cs_frozen));
        auto pos = tape.gauss_log_density(f_g, mu, lv);
        auto neg = tape.gauss_log_density(
            tape.permute_rows(f_g, rng.permutation(static_cast<int>(x.rows()))),
            mu, lv);
        auto l_id = tape.sub(pos, neg);
        out.l_id = static_cast<double>(tape.value(l_id)(0, 0));
        total = tape.add(l_id, l_cls);
    } else {
        total = l_cls;
    }
    tape.backward(total);
    adam_step_inplace(m.fg, fg_p.grads(tape), m.fg_opt, lr);
    adam_step_inplace(m.head, head_p.grads(tape), m.head_opt, lr);
    if (idm_trainable) adam_step_inplace(m.idm, idm_p->grads(tape), m.idm_opt, lr);
    if (train_fcs) adam_step_inplace(m.fcs, fcs_p->grads(tape), m.fcs_opt, lr);
    return out;
}

// Prediction accuracy of argmax H([f_g, f_cs]).
template <class S>
double personalized_accuracy(const ClientModels<S>& m, const Mat<S>& x,
                             const std::vector<int>& labels) {
    if (x.rows() == 0) return std::numeric_limits<double>::quiet_NaN();
    const Mat<S> logits = classify(m.head_net, m.head, m.fcs_net.eval(m.fcs, x),
                                   m.fg_net.eval(m.fg, x));
    int correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best;
        logits.row(i).maxCoeff(&best);
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace fedrir

#endif  // FEDRIR_LEARNING_HPP
