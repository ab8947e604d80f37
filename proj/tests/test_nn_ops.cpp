#include <catch2/catch_amalgamated.hpp>

#include "fdiff/gradcheck.hpp"
#include "fdiff/nn_ops.hpp"

using namespace fdiff;

namespace {

// Independent reference: plain 7-loop cross-correlation with zero padding.
std::vector<double> conv3d_reference(const std::vector<double>& x, int Ci, int D, int H, int W,
                                     const std::vector<double>& w, int Co, int k,
                                     const std::vector<double>& bias, int stride, int pad,
                                     int& Do, int& Ho, int& Wo) {
    Do = (D + 2 * pad - k) / stride + 1;
    Ho = (H + 2 * pad - k) / stride + 1;
    Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(Co) * Do * Ho * Wo, 0.0);
    for (int oc = 0; oc < Co; ++oc)
        for (int oz = 0; oz < Do; ++oz)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[oc];
                    for (int ic = 0; ic < Ci; ++ic)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const int iz = oz * stride + kz - pad;
                                    const int iy = oy * stride + ky - pad;
                                    const int ix = ox * stride + kx - pad;
                                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 || ix >= W)
                                        continue;
                                    acc += w[(((static_cast<std::size_t>(oc) * Ci + ic) * k + kz) * k + ky) * k + kx] *
                                           x[((static_cast<std::size_t>(ic) * D + iz) * H + iy) * W + ix];
                                }
                    out[((static_cast<std::size_t>(oc) * Do + oz) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv3d scalar and identity kernels") {
    Tensor x = Tensor::constant({1, 1, 1, 1}, 3.0);
    Tensor w = Tensor::constant({1, 1, 1, 1, 1}, 2.0);
    Tensor b = Tensor::zeros({1});
    Tensor y = conv3d(x, w, b);
    CHECK(y.item() == 6.0);

    SeededRng rng(5);
    Tensor v = Tensor::gaussian({1, 3, 3, 3}, rng);
    Tensor id = Tensor::ones({1, 1, 1, 1, 1});
    Tensor out = conv3d(v, id, Tensor());
    CHECK(max_abs_diff(out, v) == 0.0);
}

TEST_CASE("conv3d matches the reference implementation") {
    SeededRng rng(99);
    Tensor x = Tensor::gaussian({1, 3, 3, 3}, rng);
    Tensor w = Tensor::gaussian({2, 1, 3, 3, 3}, rng);
    Tensor b = Tensor::gaussian({2}, rng);
    Tensor y = conv3d(x, w, b, 1, 1);

    int Do, Ho, Wo;
    auto ref = conv3d_reference(x.values(), 1, 3, 3, 3, w.values(), 2, 3, b.values(), 1, 1,
                                Do, Ho, Wo);
    REQUIRE(y.shape() == Shape{2, Do, Ho, Wo});
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("conv3d reference agreement across random shapes") {
    SeededRng rng(1234);
    for (int trial = 0; trial < 25; ++trial) {
        const int Ci = 1 + static_cast<int>(rng.uniform_int(4));
        const int Co = 1 + static_cast<int>(rng.uniform_int(4));
        const int k = rng.uniform_int(2) == 0 ? 1 : 3;
        const int stride = 1 + static_cast<int>(rng.uniform_int(2));
        const int pad = k / 2;
        const int D = k + static_cast<int>(rng.uniform_int(8 - k));
        const int H = k + static_cast<int>(rng.uniform_int(8 - k));
        const int W = k + static_cast<int>(rng.uniform_int(8 - k));
        Tensor x = Tensor::gaussian({Ci, D, H, W}, rng);
        Tensor w = Tensor::gaussian({Co, Ci, k, k, k}, rng);
        Tensor b = Tensor::gaussian({Co}, rng);
        Tensor y = conv3d(x, w, b, stride, pad);
        int Do, Ho, Wo;
        auto ref = conv3d_reference(x.values(), Ci, D, H, W, w.values(), Co, k, b.values(),
                                    stride, pad, Do, Ho, Wo);
        REQUIRE(y.shape() == Shape{Co, Do, Ho, Wo});
        double m = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i)
            m = std::max(m, std::abs(y.data()[i] - ref[i]));
        CHECK(m < 1e-12);
    }
}

TEST_CASE("conv3d validation") {
    Tensor x = Tensor::zeros({2, 4, 4, 4});
    CHECK_THROWS_AS(conv3d(x, Tensor::zeros({1, 3, 3, 3, 3}), Tensor()), ShapeMismatch);
    CHECK_THROWS_AS(conv3d(x, Tensor::zeros({1, 2, 2, 2, 2}), Tensor()), InvalidShape); // even k
    CHECK_THROWS_AS(conv3d(x, Tensor::zeros({1, 2, 3, 3, 3}), Tensor::zeros({2})), ShapeMismatch);
}

TEST_CASE("conv3d gradients") {
    SeededRng rng(7);
    Tensor x = Tensor::gaussian({2, 3, 3, 3}, rng);
    Tensor w = Tensor::gaussian({2, 2, 3, 3, 3}, rng);
    for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] *= 0.3;
    Tensor b = Tensor::gaussian({2}, rng);

    auto loss = [&]() {
        return sum(sigmoid(conv3d(x, w, b, 1, 1)));
    };
    auto report = grad_check_params(loss, {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-6);
    CHECK(report.pass);

    // strided case
    Tensor ws = Tensor::gaussian({1, 2, 3, 3, 3}, rng);
    auto loss2 = [&]() { return sum(sigmoid(conv3d(x, ws, Tensor(), 2, 1))); };
    auto r2 = grad_check_params(loss2, {{"x", x}, {"ws", ws}}, 1e-5, 1e-6);
    CHECK(r2.pass);
}

TEST_CASE("batchnorm3d forward semantics") {
    // hand statistics on channel values {1,2,3,4}
    Tensor x = Tensor::from_data({1, 4, 1, 1}, {1, 2, 3, 4});
    BatchNorm3d bn(1);
    Tensor y = batchnorm3d(x, bn, BnMode::train);
    const double m = 2.5, v = 1.25;
    const double is = 1.0 / std::sqrt(v + 1e-5);
    for (int i = 0; i < 4; ++i)
        CHECK(y.data()[i] == Catch::Approx((x.data()[i] - m) * is).epsilon(1e-14));
    // running stats picked up one momentum step
    CHECK(bn.running_mean.data()[0] == Catch::Approx(0.1 * m));
    CHECK(bn.running_var.data()[0] == Catch::Approx(0.9 + 0.1 * v * 4.0 / 3.0));

    // already normalized input passes through up to the eps correction
    Tensor z = Tensor::from_data({1, 4, 1, 1}, {-1, 1, -1, 1});
    BatchNorm3d bn2(1);
    Tensor yz = batchnorm3d(z, bn2, BnMode::train);
    CHECK(max_abs_diff(yz, z) < 1e-5);

    // gamma = 0 collapses to beta
    BatchNorm3d bn3(1);
    bn3.gamma.data()[0] = 0.0;
    bn3.beta.data()[0] = 0.75;
    Tensor y3 = batchnorm3d(x, bn3, BnMode::train);
    for (int i = 0; i < 4; ++i) CHECK(y3.data()[i] == 0.75);
}

TEST_CASE("batchnorm3d degenerate batch and eval mode") {
    BatchNorm3d bn(2);
    Tensor single = Tensor::ones({2, 1, 1, 1});
    CHECK_THROWS_AS(batchnorm3d(single, bn, BnMode::train), DegenerateBatch);

    // eval path is a fixed affine map from the running stats
    bn.running_mean = Tensor::from_data({2}, {1.0, -1.0});
    bn.running_var = Tensor::from_data({2}, {4.0, 0.25});
    Tensor x = Tensor::from_data({2, 2, 1, 1}, {1, 3, -1, 0});
    Tensor y = batchnorm3d(x, bn, BnMode::eval);
    CHECK(y.data()[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(y.data()[1] == Catch::Approx(2.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-12));
    CHECK(y.data()[3] == Catch::Approx(1.0 / std::sqrt(0.25 + 1e-5)).epsilon(1e-12));
    // eval must not touch the stats
    CHECK(bn.running_mean.data()[0] == 1.0);
}

TEST_CASE("batchnorm3d gradients in both modes") {
    SeededRng rng(31);
    Tensor x = Tensor::gaussian({2, 3, 2, 2}, rng);
    BatchNorm3d bn(2);
    bn.gamma.data()[0] = 1.3;
    bn.gamma.data()[1] = 0.7;
    bn.beta.data()[0] = -0.2;
    bn.running_mean = Tensor::from_data({2}, {0.3, -0.4});
    bn.running_var = Tensor::from_data({2}, {1.5, 0.8});

    for (BnMode mode : {BnMode::train, BnMode::eval}) {
        auto loss = [&]() { return sum(sigmoid(batchnorm3d(x, bn, mode))); };
        auto report = grad_check_params(
            loss, {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}}, 1e-5, 1e-5);
        CHECK(report.pass);
        // keep running stats fixed between analytic and numeric passes
        bn.running_mean = Tensor::from_data({2}, {0.3, -0.4});
        bn.running_var = Tensor::from_data({2}, {1.5, 0.8});
    }
}

TEST_CASE("global average pooling") {
    Tensor c = Tensor::constant({3, 2, 2, 2}, 1.75);
    Tensor y = global_avg_pool3d(c);
    REQUIRE(y.shape() == Shape{3, 1, 1, 1});
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == 1.75);

    Tensor x = Tensor::from_data({1, 2, 1, 1}, {1, 3});
    CHECK(global_avg_pool3d(x).item() == 2.0);

    SeededRng rng(13);
    Tensor r = Tensor::gaussian({2, 2, 2, 2}, rng);
    auto res = grad_check([](const Tensor& t) { return sum(sigmoid(global_avg_pool3d(t))); },
                          r, 1e-5, 1e-6);
    CHECK(res.pass);
}

TEST_CASE("nearest upsampling") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {1, 2});
    Tensor y = upsample_nearest3d(x, 2);
    REQUIRE(y.shape() == Shape{1, 2, 2, 4});
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 1.0);
    CHECK(y.data()[2] == 2.0);
    CHECK(y.data()[3] == 2.0);

    SeededRng rng(17);
    Tensor r = Tensor::gaussian({2, 2, 2, 2}, rng);
    auto res = grad_check([](const Tensor& t) { return sum(sigmoid(upsample_nearest3d(t, 2))); },
                          r, 1e-5, 1e-6);
    CHECK(res.pass);
}

TEST_CASE("channel concatenation") {
    Tensor a = Tensor::constant({1, 2, 1, 1}, 1.0);
    Tensor b = Tensor::constant({2, 2, 1, 1}, 2.0);
    Tensor y = concat_channels(a, b);
    REQUIRE(y.shape() == Shape{3, 2, 1, 1});
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[2] == 2.0);

    CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({1, 3, 1, 1})), ShapeMismatch);

    SeededRng rng(19);
    Tensor ra = Tensor::gaussian({1, 2, 2, 2}, rng);
    Tensor rb = Tensor::gaussian({2, 2, 2, 2}, rng);
    auto loss = [&]() { return sum(sigmoid(concat_channels(ra, rb))); };
    auto report = grad_check_params(loss, {{"a", ra}, {"b", rb}}, 1e-5, 1e-6);
    CHECK(report.pass);
}
