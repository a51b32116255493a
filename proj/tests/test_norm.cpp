#include <doctest.h>

#include <random>

#include "adaseg/layers.hpp"
#include "adaseg/norm.hpp"
#include "gradcheck.hpp"

using namespace adaseg;

namespace {

Tensor feature(const Shape& shape, const std::vector<real>& vals) { return Tensor(shape, vals); }

Tensor ones(long c) { return Tensor({c}, real(1)); }
Tensor zeros(long c) { return Tensor({c}); }

AdaBNState identity_state(long c, long code_c, real eps) {
    AdaBNState st;
    st.gamma = Tensor({c}, real(1));
    st.beta = Tensor({c});
    st.code_projection = Tensor({c, code_c});
    for (long i = 0; i < std::min(c, code_c); ++i) st.code_projection[i * code_c + i] = 1;
    st.epsilon = eps;
    return st;
}

}  // namespace

TEST_CASE("batch_norm hand arithmetic") {
    // single channel, values [0, 2] flattened: mu=1 sigma=1
    Tensor x = feature({1, 1, 2, 1}, {0, 2});
    Tensor z = batch_norm(x, ones(1), zeros(1), 0, StatsMode::Batch);
    CHECK(z[0] == doctest::Approx(-1).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(1).epsilon(1e-12));

    Tensor z2 = batch_norm(x, Tensor({1}, {real(3)}), Tensor({1}, {real(5)}), 0, StatsMode::Batch);
    CHECK(z2[0] == doctest::Approx(2).epsilon(1e-12));
    CHECK(z2[1] == doctest::Approx(8).epsilon(1e-12));
}

TEST_CASE("batch_norm identity on standardized input") {
    // per-channel mean 0, std 1 -> output equals input
    Tensor x = feature({1, 2, 2, 2}, {-1, 1, -1, 1, 1, -1, 1, -1});
    Tensor z = batch_norm(x, ones(2), zeros(2), 0, StatsMode::Batch);
    for (long i = 0; i < x.numel(); ++i) CHECK(z[i] == doctest::Approx(x[i]).epsilon(1e-10));
}

TEST_CASE("batch_norm errors") {
    Tensor x = feature({1, 1, 2, 1}, {0, 2});
    CHECK_THROWS_AS(batch_norm(x, ones(3), zeros(3), 0, StatsMode::Batch), shape_error);
    Tensor flat = feature({1, 1, 2, 1}, {1, 1});
    CHECK_THROWS_AS(batch_norm(flat, ones(1), zeros(1), 0, StatsMode::Batch), numeric_error);
    CHECK_THROWS_AS(batch_norm(x, ones(1), zeros(1), 0, StatsMode::Running), validation_error);
}

TEST_CASE("batch_norm running mode uses supplied stats") {
    Tensor x = feature({1, 1, 2, 1}, {0, 2});
    ChannelStats run{Tensor({1}, {real(1)}), Tensor({1}, {real(2)})};
    Tensor z = batch_norm(x, ones(1), zeros(1), 0, StatsMode::Running, &run);
    CHECK(z[0] == doctest::Approx(-0.5));
    CHECK(z[1] == doctest::Approx(0.5));
}

TEST_CASE("batch_norm affine-rescale invariance") {
    auto x = gradcheck::random_tensor({2, 3, 4, 4}, 99);
    Tensor z1 = batch_norm(x, ones(3), zeros(3), 1e-10, StatsMode::Batch);
    Tensor ax = x;
    for (long c = 0; c < 3; ++c)
        for (long b = 0; b < 2; ++b)
            for (long i = 0; i < 16; ++i) {
                auto& v = ax[(b * 3 + c) * 16 + i];
                v = real(2.5) * v + real(0.7);
            }
    Tensor z2 = batch_norm(ax, ones(3), zeros(3), 1e-10, StatsMode::Batch);
    for (long i = 0; i < z1.numel(); ++i) CHECK(std::abs(z1[i] - z2[i]) < 1e-4);
}

TEST_CASE("ada_in hand arithmetic and self-alignment") {
    Tensor x = feature({1, 1, 2, 1}, {0, 2});
    Tensor y = feature({1, 1, 2, 1}, {1, 5});
    Tensor z = ada_in(x, y);
    CHECK(z[0] == doctest::Approx(1).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(5).epsilon(1e-12));

    Tensor self = ada_in(x, x);
    for (long i = 0; i < x.numel(); ++i) CHECK(self[i] == doctest::Approx(x[i]).epsilon(1e-10));

    Tensor bad = feature({1, 2, 1, 1}, {0, 1});
    CHECK_THROWS_AS(ada_in(x, bad), shape_error);
}

TEST_CASE("ada_in matches target statistics on random inputs") {
    auto x = gradcheck::random_tensor({2, 3, 5, 7}, 7, 0, 1);
    auto y = gradcheck::random_tensor({2, 3, 5, 7}, 8, -2, 3);
    Tensor z = ada_in(x, y);
    const long s = 35;
    for (long b = 0; b < 2; ++b)
        for (long c = 0; c < 3; ++c) {
            real mz = 0, my = 0, vz = 0, vy = 0;
            for (long i = 0; i < s; ++i) {
                mz += z[(b * 3 + c) * s + i];
                my += y[(b * 3 + c) * s + i];
            }
            mz /= s;
            my /= s;
            for (long i = 0; i < s; ++i) {
                vz += (z[(b * 3 + c) * s + i] - mz) * (z[(b * 3 + c) * s + i] - mz);
                vy += (y[(b * 3 + c) * s + i] - my) * (y[(b * 3 + c) * s + i] - my);
            }
            CHECK(std::abs(mz - my) < 1e-5);
            CHECK(std::abs(std::sqrt(vz / s) - std::sqrt(vy / s)) < 1e-5);
        }

    // idempotent given the same style input
    Tensor zz = ada_in(z, y);
    for (long i = 0; i < z.numel(); ++i) CHECK(std::abs(zz[i] - z[i]) < 1e-5);
}

TEST_CASE("code_stats hand computation and flooring") {
    AdaBNState st = identity_state(1, 1, 1e-5);
    DomainCode code;
    code.values = Tensor({1, 2, 1}, {1, 5});
    ChannelStats cs = code_stats(code, st);
    CHECK(cs.mean[0] == doctest::Approx(3).epsilon(1e-12));
    CHECK(cs.std[0] == doctest::Approx(2).epsilon(1e-12));

    DomainCode constant;
    constant.values = Tensor({1, 3, 1}, {real(0.7), real(0.7), real(0.7)});
    ChannelStats cc = code_stats(constant, st);
    CHECK(cc.mean[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(cc.std[0] == doctest::Approx(1e-5).epsilon(1e-12));  // floored exactly at eps

    DomainCode wrong;
    wrong.values = Tensor({2, 2, 1}, {0, 1, 2, 3});
    CHECK_THROWS_AS(code_stats(wrong, st), shape_error);
}

TEST_CASE("code_stats std always floored") {
    AdaBNState st = identity_state(3, 4, 1e-5);
    for (int trial = 0; trial < 20; ++trial) {
        DomainCode code;
        code.values = gradcheck::random_tensor({4, 3, 3}, 100 + trial, -2, 2);
        ChannelStats cs = code_stats(code, st);
        for (long c = 0; c < 3; ++c) CHECK(cs.std[c] >= 1e-5);
    }
}

TEST_CASE("ada_bn_forward hand arithmetic") {
    // X = [0,2]; code [1,5] under identity projection -> mu_y=3, sg_y=2
    Tensor x = feature({1, 1, 2, 1}, {0, 2});
    DomainCode code;
    code.values = Tensor({1, 2, 1}, {1, 5});

    AdaBNState st = identity_state(1, 1, 0.0);
    st.epsilon = 0;  // exact hand arithmetic
    Tensor z = ada_bn_forward(x, code, st, StatsMode::Instance);
    CHECK(z[0] == doctest::Approx(1).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(5).epsilon(1e-12));

    st.gamma[0] = 2;
    st.beta[0] = 1;
    Tensor z2 = ada_bn_forward(x, code, st, StatsMode::Instance);
    CHECK(z2[0] == doctest::Approx(3).epsilon(1e-12));
    CHECK(z2[1] == doctest::Approx(11).epsilon(1e-12));
}

TEST_CASE("ada_bn_forward reduces to batch_norm when mu_y=0 sg_y=1") {
    auto x = gradcheck::random_tensor({2, 2, 4, 4}, 11);
    // code whose projected map has exactly mean 0, std 1 per channel
    DomainCode code;
    code.values = Tensor({2, 2, 1}, {-1, 1, -1, 1});
    AdaBNState st = identity_state(2, 2, 0.0);
    st.epsilon = 0;
    Tensor z = ada_bn_forward(x, code, st, StatsMode::Batch);
    Tensor bn = batch_norm(x, ones(2), zeros(2), 0, StatsMode::Batch);
    for (long i = 0; i < z.numel(); ++i) CHECK(z[i] == doctest::Approx(bn[i]).epsilon(1e-10));
}

TEST_CASE("ada_bn_forward output statistics equal code statistics") {
    auto x = gradcheck::random_tensor({1, 3, 8, 8}, 21);
    DomainCode code;
    code.values = gradcheck::random_tensor({4, 3, 3}, 22, -1, 2);
    AdaBNState st;
    st.gamma = ones(3);
    st.beta = zeros(3);
    st.code_projection = gradcheck::random_tensor({3, 4}, 23);
    st.epsilon = 1e-10;
    ChannelStats target = code_stats(code, st);
    Tensor z = ada_bn_forward(x, code, st, StatsMode::Instance);
    const long s = 64;
    for (long c = 0; c < 3; ++c) {
        real m = 0, v = 0;
        for (long i = 0; i < s; ++i) m += z[c * s + i];
        m /= s;
        for (long i = 0; i < s; ++i) v += (z[c * s + i] - m) * (z[c * s + i] - m);
        CHECK(std::abs(m - target.mean[c]) < 1e-5);
        CHECK(std::abs(std::sqrt(v / s) - target.std[c]) < 1e-5);
    }
}

TEST_CASE("ada_bn output shape equals input shape") {
    for (auto mode : {StatsMode::Batch, StatsMode::Instance}) {
        auto x = gradcheck::random_tensor({2, 3, 4, 6}, 31);
        DomainCode code;
        code.values = gradcheck::random_tensor({5, 2, 2}, 32);
        AdaBNState st;
        st.gamma = ones(3);
        st.beta = zeros(3);
        st.code_projection = gradcheck::random_tensor({3, 5}, 33);
        Tensor z = ada_bn_forward(x, code, st, mode);
        CHECK(z.shape == x.shape);
    }
}

TEST_CASE("AdaBN layer agrees with the spec-level op") {
    auto x = gradcheck::random_tensor({2, 3, 4, 4}, 41);
    DomainCode code;
    code.values = gradcheck::random_tensor({5, 2, 2}, 42);
    AdaBNState st;
    st.gamma = gradcheck::random_tensor({3}, 43, 0.5, 1.5);
    st.beta = gradcheck::random_tensor({3}, 44);
    st.code_projection = gradcheck::random_tensor({3, 5}, 45);
    st.epsilon = 1e-5;

    nn::AdaBN layer(3, 5);
    layer.gamma = st.gamma;
    layer.beta = st.beta;
    layer.proj = st.code_projection;
    layer.eps = st.epsilon;

    for (auto mode : {StatsMode::Batch, StatsMode::Instance}) {
        Tensor expected = ada_bn_forward(x, code, st, mode);
        std::vector<const Tensor*> codes{&code.values};
        Tensor got = layer.forward(x, codes, mode, false, nullptr);
        for (long i = 0; i < expected.numel(); ++i)
            CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
}

TEST_CASE("AdaBN analytic gradients match finite differences") {
    // scalar objective: weighted sum of outputs
    auto x = gradcheck::random_tensor({2, 3, 4, 4}, 51);
    Tensor code_a = gradcheck::random_tensor({5, 2, 2}, 52);
    Tensor code_b = gradcheck::random_tensor({5, 2, 2}, 53);
    auto weights = gradcheck::random_tensor({2, 3, 4, 4}, 54);

    nn::AdaBN layer(3, 5);
    layer.gamma = gradcheck::random_tensor({3}, 55, 0.5, 1.5);
    layer.beta = gradcheck::random_tensor({3}, 56);
    layer.proj = gradcheck::random_tensor({3, 5}, 57);
    layer.eps = 1e-5;

    std::vector<const Tensor*> codes{&code_a, &code_b};
    for (auto mode : {StatsMode::Batch, StatsMode::Instance}) {
        CAPTURE(stats_mode_name(mode));
        auto loss = [&]() {
            Tensor y = layer.forward(x, codes, mode, false, nullptr);
            real acc = 0;
            for (long i = 0; i < y.numel(); ++i) acc += weights[i] * y[i];
            return acc;
        };
        nn::AdaBN::Cache cache;
        Tensor y = layer.forward(x, codes, mode, false, &cache);
        layer.zero_grad();
        Tensor dx = layer.backward(weights, cache);

        CHECK(gradcheck::check(loss, x, dx, 40).max_rel_err < 1e-4);
        CHECK(gradcheck::check(loss, layer.gamma, layer.dgamma).max_rel_err < 1e-4);
        CHECK(gradcheck::check(loss, layer.beta, layer.dbeta).max_rel_err < 1e-4);
        CHECK(gradcheck::check(loss, layer.proj, layer.dproj).max_rel_err < 1e-4);
    }
}

TEST_CASE("BatchNorm layer analytic gradients match finite differences") {
    auto x = gradcheck::random_tensor({2, 3, 4, 4}, 61);
    auto weights = gradcheck::random_tensor({2, 3, 4, 4}, 62);
    nn::BatchNorm layer(3);
    layer.gamma = gradcheck::random_tensor({3}, 63, 0.5, 1.5);
    layer.beta = gradcheck::random_tensor({3}, 64);

    auto loss = [&]() {
        Tensor y = layer.forward(x, StatsMode::Batch, false, nullptr);
        real acc = 0;
        for (long i = 0; i < y.numel(); ++i) acc += weights[i] * y[i];
        return acc;
    };
    nn::BatchNorm::Cache cache;
    layer.forward(x, StatsMode::Batch, false, &cache);
    layer.zero_grad();
    Tensor dx = layer.backward(weights, cache);
    CHECK(gradcheck::check(loss, x, dx, 40).max_rel_err < 1e-4);
    CHECK(gradcheck::check(loss, layer.gamma, layer.dgamma).max_rel_err < 1e-4);
    CHECK(gradcheck::check(loss, layer.beta, layer.dbeta).max_rel_err < 1e-4);
}
