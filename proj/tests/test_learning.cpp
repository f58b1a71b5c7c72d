#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fedrir/learning.hpp"

using namespace fedrir;
using M = Mat<double>;

namespace {

ModelDims tiny_dims() {
    ModelDims d;
    d.input = 8;
    d.k_cs = 4;
    d.k_g = 4;
    d.classes = 2;
    d.hidden = {16};
    d.idm_hidden = {8, 8};
    return d;
}

ClientModels<double> make_models(const ModelDims& d, uint64_t seed) {
    ClientModels<double> m(d);
    RngStream priv(seed);
    RngStream shared(seed + 1);
    m.init(priv, shared);
    return m;
}

// InfoDistiller rigged to output mu = 0, logvar = 0 regardless of input
ParameterSet<double> zeroed_idm(const InfoDistiller<double>& net, uint64_t seed) {
    RngStream rng(seed);
    ParameterSet<double> p = net.init(rng);
    for (std::size_t i = 0; i < p.size(); ++i) p.value(i).setZero();
    return p;
}

}  // namespace

TEST_CASE("mask_input") {
    RngStream rng(1);
    SUBCASE("r = 0 is the identity") {
        M x = random_normal<double>(3, 10, rng);
        auto [xm, mask] = mask_input<double>(x, {0.0, MaskMode::kElementwise, 1}, rng);
        CHECK(xm == x);
        CHECK(mask == M::Ones(3, 10));
    }
    SUBCASE("r = 0.6, d = 10 masks exactly 6 per sample") {
        M x = M::Ones(5, 10);
        auto [xm, mask] = mask_input<double>(x, {0.6, MaskMode::kElementwise, 1}, rng);
        for (int r = 0; r < 5; ++r) {
            CHECK(mask.row(r).sum() == 4.0);
            CHECK(xm.row(r).sum() == 4.0);
        }
    }
    SUBCASE("deterministic under equal seeds") {
        M x = random_normal<double>(4, 12, rng);
        RngStream a(77), b(77);
        auto [xa, ma] = mask_input<double>(x, {0.5, MaskMode::kElementwise, 1}, a);
        auto [xb, mb] = mask_input<double>(x, {0.5, MaskMode::kElementwise, 1}, b);
        CHECK(ma == mb);
        CHECK(xa == xb);
    }
    SUBCASE("patch mode masks whole patches") {
        M x = M::Ones(2, 16);  // 4x4 image, 2x2 patches
        auto [xm, mask] = mask_input<double>(x, {0.5, MaskMode::kPatch, 2}, rng);
        for (int r = 0; r < 2; ++r) CHECK(mask.row(r).sum() == 8.0);
    }
    SUBCASE("patch mode rejects non-square inputs") {
        M x = M::Ones(1, 10);
        RngStream r2(3);
        CHECK_THROWS_AS(mask_input<double>(x, {0.5, MaskMode::kPatch, 2}, r2),
                        TensorError);
    }
    SUBCASE("invalid ratio") {
        M x = M::Ones(1, 4);
        RngStream r2(3);
        CHECK_THROWS_AS(mask_input<double>(x, {1.0, MaskMode::kElementwise, 1}, r2),
                        TensorError);
    }
}

TEST_CASE("recon_loss") {
    RngStream rng(2);
    M x = random_normal<double>(3, 4, rng);
    CHECK(recon_loss<double>(x, x) == 0.0);
    CHECK(recon_loss<double>((x.array() + 1.0).matrix(), x) == doctest::Approx(1.0));
    // direct arithmetic oracle
    M y = random_normal<double>(3, 4, rng);
    double expect = 0.0;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) expect += (y(r, c) - x(r, c)) * (y(r, c) - x(r, c));
    expect /= 12.0;
    CHECK(recon_loss<double>(y, x) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(recon_loss<double>(y, x) >= 0.0);
    CHECK_THROWS_AS(recon_loss<double>(M::Ones(2, 2), M::Ones(2, 3)), TensorError);
}

TEST_CASE("idm_loglik closed forms") {
    ModelDims d = tiny_dims();
    d.k_cs = 1;
    d.k_g = 1;
    InfoDistiller<double> net(d);
    auto params = zeroed_idm(net, 4);

    // zero weights give mu = 0, logvar = 0; f_g = 0 sits at the mean
    M f_cs = M::Ones(3, 1);
    M f_g = M::Zero(3, 1);
    const double half_log2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    CHECK(idm_loglik(net, params, f_cs, f_g) ==
          doctest::Approx(-half_log2pi).epsilon(1e-12));

    // one unit from the mean at unit variance
    M f_g1 = M::Ones(3, 1);
    CHECK(idm_loglik(net, params, f_cs, f_g1) ==
          doctest::Approx(-half_log2pi - 0.5).epsilon(1e-12));
}

TEST_CASE("idm_loglik matches an independent density oracle") {
    ModelDims d = tiny_dims();
    InfoDistiller<double> net(d);
    RngStream rng(9);
    auto params = net.init(rng);
    M f_cs = random_normal<double>(5, d.k_cs, rng);
    M f_g = random_normal<double>(5, d.k_g, rng);

    // oracle: run the nets value-level and evaluate the density by hand
    Tape<double> t;
    auto b = BoundParams<double>::bind(t, params, false);
    auto [mu_v, lv_v] = net.forward(t, b, t.constant(f_cs));
    const M mu = t.value(mu_v);
    const M lv = t.value(lv_v);
    double total = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int k = 0; k < d.k_g; ++k) {
            const double var = std::exp(lv(i, k));
            const double diff = f_g(i, k) - mu(i, k);
            total += -0.5 * std::log(2.0 * std::numbers::pi * var) -
                     diff * diff / (2.0 * var);
        }
    CHECK(idm_loglik(net, params, f_cs, f_g) ==
          doctest::Approx(total / 5.0).epsilon(1e-10));
}

TEST_CASE("vclub_estimate") {
    ModelDims d = tiny_dims();
    InfoDistiller<double> net(d);
    RngStream rng(10);
    auto params = net.init(rng);
    M f_cs = random_normal<double>(6, d.k_cs, rng);
    M f_g = random_normal<double>(6, d.k_g, rng);

    SUBCASE("identity permutation gives exactly zero") {
        CHECK(vclub_estimate(net, params, f_cs, f_g, {0, 1, 2, 3, 4, 5}) == 0.0);
    }
    SUBCASE("B < 2 rejected") {
        RngStream r2(1);
        const M one_cs = f_cs.topRows(1), one_g = f_g.topRows(1);
        CHECK_THROWS_AS(vclub_estimate(net, params, one_cs, one_g, r2),
                        TensorError);
    }
    SUBCASE("matches positive-minus-negative decomposition") {
        std::vector<int> perm = {1, 2, 0, 4, 5, 3};
        M f_g_perm(6, d.k_g);
        for (int i = 0; i < 6; ++i) f_g_perm.row(i) = f_g.row(perm[i]);
        const double expect = idm_loglik(net, params, f_cs, f_g) -
                              idm_loglik(net, params, f_cs, f_g_perm);
        CHECK(vclub_estimate(net, params, f_cs, f_g, perm) ==
              doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("classify") {
    ModelDims d = tiny_dims();
    d.k_cs = 1;
    d.k_g = 1;
    auto head = nets::classification_head<double>(d);
    RngStream rng(12);
    auto params = head.init(rng);

    SUBCASE("zero weights give zero logits") {
        auto zeroed = params.zeros_like();
        const M ones = M::Ones(3, 1);
        M logits = classify(head, zeroed, ones, ones);
        CHECK(logits == M::Zero(3, 2));
    }
    SUBCASE("hand-set affine map, concat order [f_g, f_cs]") {
        ParameterSet<double> p = params.zeros_like();
        p.at("head.w0") << 1.0, -1.0,   // f_g weight row
                           2.0, 0.5;    // f_cs weight row
        p.at("head.b0") << 0.25, -0.25;
        M f_cs(1, 1), f_g(1, 1);
        f_cs << 3.0;
        f_g << 2.0;
        M logits = classify(head, p, f_cs, f_g);
        CHECK(logits(0, 0) == doctest::Approx(2.0 * 1.0 + 3.0 * 2.0 + 0.25));
        CHECK(logits(0, 1) == doctest::Approx(2.0 * -1.0 + 3.0 * 0.5 - 0.25));
    }
    SUBCASE("batch permutation equivariance") {
        M f_cs = random_normal<double>(4, 1, rng);
        M f_g = random_normal<double>(4, 1, rng);
        M logits = classify(head, params, f_cs, f_g);
        std::vector<int> perm = {2, 0, 3, 1};
        M f_cs_p(4, 1), f_g_p(4, 1);
        for (int i = 0; i < 4; ++i) {
            f_cs_p.row(i) = f_cs.row(perm[i]);
            f_g_p.row(i) = f_g.row(perm[i]);
        }
        M logits_p = classify(head, params, f_cs_p, f_g_p);
        for (int i = 0; i < 4; ++i) CHECK(logits_p.row(i) == logits.row(perm[i]));
    }
}

TEST_CASE("cls_loss") {
    CHECK(cls_loss<double>(M::Zero(2, 10), {3, 7}) ==
          doctest::Approx(std::log(10.0)).epsilon(1e-12));
    // large-margin correct logits drive the loss to zero
    M confident = M::Zero(1, 4);
    confident(0, 2) = 50.0;
    CHECK(cls_loss<double>(confident, {2}) < 1e-10);
    // log-sum-exp arithmetic oracle
    RngStream rng(13);
    M logits = random_normal<double>(3, 4, rng);
    std::vector<int> y = {1, 3, 0};
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        double z = 0.0;
        for (int c = 0; c < 4; ++c) z += std::exp(logits(i, c));
        expect += std::log(z) - logits(i, y[static_cast<std::size_t>(i)]);
    }
    CHECK(cls_loss<double>(logits, y) == doctest::Approx(expect / 3.0).epsilon(1e-10));
    CHECK_THROWS_AS(cls_loss<double>(logits, {1, 2, 4}), TensorError);
}

TEST_CASE("local_update_mcsl") {
    ModelDims d = tiny_dims();
    MaskSpec mask{0.25, MaskMode::kElementwise, 1};
    RngStream data_rng(20);
    M x = (random_normal<double>(6, d.input, data_rng, 0.25).array() + 0.5)
              .min(1.0).max(0.0).matrix();

    SUBCASE("lr = 0 leaves parameters unchanged but reports the loss") {
        auto m = make_models(d, 21);
        auto fcs0 = m.fcs, gen0 = m.gen, fg0 = m.fg, head0 = m.head, idm0 = m.idm;
        RngStream rng(1);
        const double loss = local_update_mcsl(m, x, mask, 0.0, rng);
        CHECK(loss > 0.0);
        CHECK(m.fcs == fcs0);
        CHECK(m.gen == gen0);
        CHECK(m.fg == fg0);
        CHECK(m.head == head0);
        CHECK(m.idm == idm0);
    }
    SUBCASE("overfits one fixed batch; r = 0 converges toward zero") {
        auto m = make_models(d, 22);
        RngStream rng(2);
        MaskSpec none{0.0, MaskMode::kElementwise, 1};
        double first = local_update_mcsl(m, x, none, 5e-3, rng);
        double last = first;
        for (int i = 0; i < 400; ++i) last = local_update_mcsl(m, x, none, 5e-3, rng);
        CHECK(last < 0.25 * first);
        CHECK(last < 0.02);
    }
    SUBCASE("identical seeds give identical parameters") {
        auto run = [&]() {
            auto m = make_models(d, 23);
            RngStream rng(3);
            for (int i = 0; i < 5; ++i) local_update_mcsl(m, x, mask, 1e-3, rng);
            return m.fcs;
        };
        CHECK(run() == run());
    }
}

TEST_CASE("local_update_id") {
    ModelDims d = tiny_dims();
    RngStream data_rng(30);
    M x = (random_normal<double>(6, d.input, data_rng, 0.25).array() + 0.5)
              .min(1.0).max(0.0).matrix();
    std::vector<int> y = {0, 1, 0, 1, 0, 1};

    SUBCASE("lr = 0 leaves all parameters unchanged") {
        for (auto mode : {IdmMode::kAlternating, IdmMode::kJoint}) {
            auto m = make_models(d, 31);
            auto fcs0 = m.fcs, fg0 = m.fg, head0 = m.head, idm0 = m.idm;
            RngStream rng(1);
            local_update_id(m, x, y, mode, Ablation::kNone, 0.0, rng);
            CHECK(m.fcs == fcs0);
            CHECK(m.fg == fg0);
            CHECK(m.head == head0);
            CHECK(m.idm == idm0);
        }
    }
    SUBCASE("freeze contract: F_cs untouched by the ID stage") {
        auto m = make_models(d, 32);
        auto fcs0 = m.fcs;
        RngStream rng(2);
        for (int i = 0; i < 10; ++i)
            local_update_id(m, x, y, IdmMode::kAlternating, Ablation::kNone, 1e-3, rng);
        CHECK(m.fcs == fcs0);
        CHECK(m.fcs_opt.t == 0);
    }
    SUBCASE("no_mcsl trains F_cs through the classification path") {
        auto m = make_models(d, 33);
        auto fcs0 = m.fcs;
        RngStream rng(3);
        local_update_id(m, x, y, IdmMode::kAlternating, Ablation::kNoMcsl, 1e-3, rng);
        CHECK(!(m.fcs == fcs0));
    }
    SUBCASE("no_id reports no L_id and leaves the distiller untouched") {
        auto m = make_models(d, 34);
        auto idm0 = m.idm;
        RngStream rng(4);
        auto losses =
            local_update_id(m, x, y, IdmMode::kAlternating, Ablation::kNoId, 1e-3, rng);
        CHECK(std::isnan(losses.l_id));
        CHECK(m.idm == idm0);
    }
    SUBCASE("separable toy batch reaches train accuracy 1.0") {
        ModelDims sep = tiny_dims();
        auto m = make_models(sep, 35);
        // two linearly separable blobs
        M xs(8, sep.input);
        std::vector<int> ys;
        RngStream rng(5);
        for (int i = 0; i < 8; ++i) {
            const int label = i % 2;
            ys.push_back(label);
            for (int j = 0; j < sep.input; ++j)
                xs(i, j) = std::clamp(
                    (label ? 0.8 : 0.2) + 0.05 * rng.normal(), 0.0, 1.0);
        }
        for (int step = 0; step < 200; ++step)
            local_update_id(m, xs, ys, IdmMode::kAlternating, Ablation::kNone,
                            5e-3, rng);
        CHECK(personalized_accuracy(m, xs, ys) == 1.0);
    }
}

TEST_CASE("batch-order invariance of losses") {
    ModelDims d = tiny_dims();
    InfoDistiller<double> net(d);
    RngStream rng(40);
    auto idm_params = net.init(rng);
    M f_cs = random_normal<double>(5, d.k_cs, rng);
    M f_g = random_normal<double>(5, d.k_g, rng);
    M x_hat = random_normal<double>(5, d.input, rng);
    M x = random_normal<double>(5, d.input, rng);
    M logits = random_normal<double>(5, d.classes, rng);
    std::vector<int> y = {0, 1, 1, 0, 1};

    std::vector<int> perm = {3, 1, 4, 0, 2};
    auto permute = [&](const M& m) {
        M out(m.rows(), m.cols());
        for (int i = 0; i < m.rows(); ++i) out.row(i) = m.row(perm[static_cast<std::size_t>(i)]);
        return out;
    };
    std::vector<int> y_p(5);
    for (int i = 0; i < 5; ++i) y_p[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    CHECK(recon_loss<double>(permute(x_hat), permute(x)) ==
          doctest::Approx(recon_loss<double>(x_hat, x)).epsilon(1e-14));
    CHECK(cls_loss<double>(permute(logits), y_p) ==
          doctest::Approx(cls_loss<double>(logits, y)).epsilon(1e-12));
    CHECK(idm_loglik(net, idm_params, permute(f_cs), permute(f_g)) ==
          doctest::Approx(idm_loglik(net, idm_params, f_cs, f_g)).epsilon(1e-12));
}

TEST_CASE("log-variance clamp keeps densities finite") {
    ModelDims d = tiny_dims();
    InfoDistiller<double> net(d);
    RngStream rng(50);
    auto params = net.init(rng);
    // huge weights would overflow exp(logvar) without the clamp
    for (std::size_t i = 0; i < params.size(); ++i)
        params.value(i) = (params.value(i).array() * 500.0).matrix();
    M f_cs = random_normal<double>(3, d.k_cs, rng);
    M f_g = random_normal<double>(3, d.k_g, rng);
    CHECK(std::isfinite(idm_loglik(net, params, f_cs, f_g)));
}
