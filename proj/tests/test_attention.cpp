#include <catch2/catch_amalgamated.hpp>

#include "fdiff/attention.hpp"
#include "fdiff/gradcheck.hpp"

using namespace fdiff;

namespace {

void zero_branch(MsCamBranch& b) {
    auto zero = [](Tensor t) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
    };
    zero(b.pw1.w);
    zero(b.pw1.b);
    zero(b.pw2.w);
    zero(b.pw2.b);
    zero(b.bn1.gamma);
    zero(b.bn1.beta);
    zero(b.bn2.gamma);
    zero(b.bn2.beta);
}

void zero_mscam(MsCamParams& p) {
    zero_branch(p.local_branch);
    zero_branch(p.global_branch);
}

} // namespace

TEST_CASE("mscam construction validates the reduction") {
    SeededRng rng(1);
    CHECK_THROWS_AS(MsCamParams(6, 4, rng), InvalidReduction);
    CHECK_THROWS_AS(MsCamParams(4, 8, rng), InvalidReduction);
    MsCamParams ok(8, 4, rng);
    CHECK(ok.local_branch.pw1.w.shape() == Shape{2, 8, 1, 1, 1});
    CHECK(ok.local_branch.pw2.w.shape() == Shape{8, 2, 1, 1, 1});
}

TEST_CASE("mscam weights") {
    SeededRng rng(2);
    MsCamParams p(4, 2, rng);

    // zeroed branches give sigmoid(0) = 0.5 everywhere
    MsCamParams z(4, 2, rng);
    zero_mscam(z);
    Tensor x = Tensor::gaussian({4, 2, 2, 2}, rng);
    Tensor m0 = mscam_weights(x, z, BnMode::train);
    for (std::int64_t i = 0; i < m0.numel(); ++i) CHECK(m0.data()[i] == 0.5);

    // strict (0,1) range on random parameters
    Tensor m = mscam_weights(x, p, BnMode::train);
    CHECK(m.shape() == x.shape());
    for (std::int64_t i = 0; i < m.numel(); ++i) {
        CHECK(m.data()[i] > 0.0);
        CHECK(m.data()[i] < 1.0);
    }

    // tied branches on a spatially constant input give spatially constant
    // weights in eval mode (local and global paths then agree)
    MsCamParams tied(4, 2, rng);
    tied.global_branch = tied.local_branch;
    Tensor c = Tensor::zeros({4, 2, 2, 2});
    for (int ch = 0; ch < 4; ++ch)
        for (int i = 0; i < 8; ++i) c.data()[ch * 8 + i] = 0.3 * (ch + 1);
    Tensor mc = mscam_weights(c, tied, BnMode::eval);
    for (int ch = 0; ch < 4; ++ch)
        for (int i = 1; i < 8; ++i)
            CHECK(mc.data()[ch * 8 + i] == Catch::Approx(mc.data()[ch * 8]).epsilon(1e-14));

    CHECK_THROWS_AS(mscam_weights(Tensor::zeros({3, 2, 2, 2}), p, BnMode::eval), ShapeMismatch);
}

TEST_CASE("attention fusion blends convexly") {
    SeededRng rng(3);
    MsCamParams p(2, 2, rng);

    Tensor x = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor z = af(x, x, p, BnMode::eval);
    CHECK(max_abs_diff(z, x) == 0.0); // exact, not approximate

    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = Tensor::gaussian({2, 2, 2, 2}, rng);
        Tensor b = Tensor::gaussian({2, 2, 2, 2}, rng);
        Tensor out = af(a, b, p, BnMode::eval);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] >= std::min(a.data()[i], b.data()[i]));
            CHECK(out.data()[i] <= std::max(a.data()[i], b.data()[i]));
        }
    }

    // saturated gate selects Y: drive the local-branch output strongly
    // positive and check Z lands on Y
    MsCamParams sat(2, 2, rng);
    zero_mscam(sat);
    sat.local_branch.bn2.beta.data()[0] = 60.0;
    sat.local_branch.bn2.beta.data()[1] = 60.0;
    Tensor a = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor b = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor sel = af(a, b, sat, BnMode::eval);
    CHECK(max_abs_diff(sel, b) < 1e-12);

    CHECK_THROWS_AS(af(a, Tensor::zeros({2, 2, 2, 1}), p), ShapeMismatch);
}

TEST_CASE("iterative attention fusion") {
    SeededRng rng(4);
    MsCamParams s1(2, 2, rng), s2(2, 2, rng);

    Tensor x = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor z = iaf(x, x, s1, s2, BnMode::eval);
    CHECK(max_abs_diff(z, x) == 0.0);

    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = Tensor::gaussian({2, 2, 2, 2}, rng);
        Tensor b = Tensor::gaussian({2, 2, 2, 2}, rng);
        Tensor out = iaf(a, b, s1, s2, BnMode::eval);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] >= std::min(a.data()[i], b.data()[i]));
            CHECK(out.data()[i] <= std::max(a.data()[i], b.data()[i]));
        }
    }

    // both MS-CAMs zeroed: every gate is 0.5, so Z = (X + Y) / 2
    MsCamParams z1(2, 2, rng), z2(2, 2, rng);
    zero_mscam(z1);
    zero_mscam(z2);
    Tensor a = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor b = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor out = iaf(a, b, z1, z2, BnMode::eval);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == Catch::Approx(0.5 * (a.data()[i] + b.data()[i])).epsilon(1e-14));
}

TEST_CASE("trajectory fusion fold") {
    SeededRng rng(5);
    MsCamParams s1(1, 1, rng), s2(1, 1, rng);

    Tensor p0 = Tensor::gaussian({1, 2, 2, 2}, rng);
    CHECK(max_abs_diff(fuse_trajectory({p0}, s1, s2), p0) == 0.0);

    // identical predictions are a fixed point, any parameters
    std::vector<Tensor> same(5, p0);
    CHECK(max_abs_diff(fuse_trajectory(same, s1, s2), p0) == 0.0);

    // two predictions under zeroed MS-CAMs give the elementwise mean
    MsCamParams z1(1, 1, rng), z2(1, 1, rng);
    zero_mscam(z1);
    zero_mscam(z2);
    Tensor p1 = Tensor::gaussian({1, 2, 2, 2}, rng);
    Tensor mean2 = fuse_trajectory({p0, p1}, z1, z2);
    for (std::int64_t i = 0; i < mean2.numel(); ++i)
        CHECK(mean2.data()[i] == Catch::Approx(0.5 * (p0.data()[i] + p1.data()[i])).epsilon(1e-14));

    CHECK_THROWS_AS(fuse_trajectory({}, s1, s2), EmptyTrajectory);
    CHECK_THROWS_AS(fuse_trajectory({p0, Tensor::zeros({1, 1, 1, 1})}, s1, s2), ShapeMismatch);
}

TEST_CASE("fusion gradients match finite differences") {
    SeededRng rng(6);
    MsCamParams s1(2, 2, rng), s2(2, 2, rng);
    Tensor x = Tensor::gaussian({2, 2, 2, 2}, rng);
    Tensor y = Tensor::gaussian({2, 2, 2, 2}, rng);

    std::vector<std::pair<std::string, Tensor>> params = {
        {"x", x},
        {"y", y},
        {"s1.local.pw1.w", s1.local_branch.pw1.w},
        {"s1.local.pw2.b", s1.local_branch.pw2.b},
        {"s1.local.bn1.gamma", s1.local_branch.bn1.gamma},
        {"s1.global.pw1.w", s1.global_branch.pw1.w},
        {"s1.global.bn2.beta", s1.global_branch.bn2.beta},
        {"s2.local.pw1.w", s2.local_branch.pw1.w},
        {"s2.global.pw2.w", s2.global_branch.pw2.w},
    };

    auto loss_af = [&]() { return sum(sigmoid(af(x, y, s1, BnMode::train))); };
    CHECK(grad_check_params(loss_af, params, 1e-5, 1e-4).pass);

    auto loss_iaf = [&]() { return sum(sigmoid(iaf(x, y, s1, s2, BnMode::train))); };
    CHECK(grad_check_params(loss_iaf, params, 1e-5, 1e-4).pass);
}
