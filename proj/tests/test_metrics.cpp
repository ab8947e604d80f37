#include <catch2/catch_amalgamated.hpp>

#include "fdiff/metrics.hpp"
#include "fdiff/rng.hpp"

using namespace fdiff;

namespace {

// Independent oracle: boundary surfaces by explicit 6-neighborhood scan, all
// nearest distances by exhaustive pairing, percentile recomputed from scratch.
std::optional<double> hd95_bruteforce(const Tensor& a, const Tensor& b) {
    const int D = a.dim(0), H = a.dim(1), W = a.dim(2);
    auto collect = [&](const Tensor& m) {
        std::vector<std::array<int, 3>> s;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    if (m.data()[(static_cast<std::int64_t>(z) * H + y) * W + x] == 0.0) continue;
                    bool edge = false;
                    const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                          {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
                    for (auto& d : nb) {
                        const int zz = z + d[0], yy = y + d[1], xx = x + d[2];
                        if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) {
                            edge = true;
                            break;
                        }
                        if (m.data()[(static_cast<std::int64_t>(zz) * H + yy) * W + xx] == 0.0) {
                            edge = true;
                            break;
                        }
                    }
                    if (edge) s.push_back({z, y, x});
                }
        return s;
    };
    auto sa = collect(a), sb = collect(b);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty()) return std::nullopt;
    std::vector<double> all;
    auto push_directed = [&](const auto& from, const auto& to) {
        for (auto& p : from) {
            double best = 1e300;
            for (auto& q : to) {
                const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
            }
            all.push_back(best);
        }
    };
    push_directed(sa, sb);
    push_directed(sb, sa);
    std::sort(all.begin(), all.end());
    const double rank = 0.95 * static_cast<double>(all.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= all.size()) return all.back();
    return all[lo] + (rank - static_cast<double>(lo)) * (all[lo + 1] - all[lo]);
}

Tensor random_mask(int D, int H, int W, SeededRng& rng, double p_fg) {
    Tensor m = Tensor::zeros({D, H, W});
    for (std::int64_t i = 0; i < m.numel(); ++i)
        m.data()[i] = rng.uniform() < p_fg ? 1.0 : 0.0;
    return m;
}

} // namespace

TEST_CASE("overlap metrics on hand cases") {
    // |A| = |B| = 4, overlap 2 -> DSC 0.5
    Tensor a = Tensor::from_data({8}, {1, 1, 1, 1, 0, 0, 0, 0});
    Tensor b = Tensor::from_data({8}, {1, 1, 0, 0, 1, 1, 0, 0});
    CHECK(dsc(a, b) == 0.5);

    // |A n B| = 2, |A u B| = 6 -> Jaccard 1/3
    CHECK(jaccard(a, b) == Catch::Approx(1.0 / 3.0).epsilon(1e-15));

    // TP = 3, FN = 1 -> recall 0.75
    Tensor gt = Tensor::from_data({6}, {1, 1, 1, 1, 0, 0});
    Tensor pr = Tensor::from_data({6}, {1, 1, 1, 0, 1, 0});
    CHECK(recall(pr, gt) == 0.75);

    // identical and disjoint masks
    CHECK(dsc(a, a) == 1.0);
    CHECK(jaccard(a, a) == 1.0);
    CHECK(recall(a, a) == 1.0);
    Tensor dis = Tensor::from_data({8}, {0, 0, 0, 0, 0, 0, 1, 1});
    CHECK(dsc(a, dis) == 0.0);

    // empty-mask conventions
    Tensor e = Tensor::zeros({8});
    CHECK(dsc(e, e) == 1.0);
    CHECK(jaccard(e, e) == 1.0);
    CHECK(recall(a, e) == 1.0);
    CHECK(recall(Tensor::ones({8}), b) == 1.0); // all-ones prediction misses nothing

    CHECK_THROWS_AS(dsc(a, Tensor::zeros({7})), ShapeMismatch);
}

TEST_CASE("metric identities on random masks") {
    SeededRng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor a = random_mask(4, 4, 4, rng, 0.4);
        Tensor b = random_mask(4, 4, 4, rng, 0.4);
        // symmetry
        CHECK(dsc(a, b) == dsc(b, a));
        CHECK(jaccard(a, b) == jaccard(b, a));
        // DSC = 2J / (1 + J)
        const double j = jaccard(a, b);
        CHECK(std::abs(dsc(a, b) - 2.0 * j / (1.0 + j)) < 1e-12);
        // recall is directional
        CHECK(recall(a, b) ==
              (dsc(a, b) == 1.0 ? recall(b, a) : recall(a, b))); // self-consistency only
    }
}

TEST_CASE("boundary extraction") {
    // filled 3x3x3 cube: all but the center voxel are boundary
    Tensor cube = Tensor::zeros({5, 5, 5});
    for (int z = 1; z <= 3; ++z)
        for (int y = 1; y <= 3; ++y)
            for (int x = 1; x <= 3; ++x)
                cube.data()[(static_cast<std::int64_t>(z) * 5 + y) * 5 + x] = 1.0;
    auto bv = boundary_voxels(cube);
    CHECK(bv.size() == 26);

    // a full volume is its own boundary shell: the border counts as background
    Tensor full = Tensor::ones({3, 3, 3});
    CHECK(boundary_voxels(full).size() == 26); // all but the center of 3^3
}

TEST_CASE("surface distances on single voxels") {
    Tensor a = Tensor::zeros({4, 4, 4});
    Tensor b = Tensor::zeros({4, 4, 4});
    a.data()[0] = 1.0;                    // (0,0,0)
    b.data()[3] = 1.0;                    // (0,0,3)
    auto [dab, dba] = surface_distances(a, b);
    REQUIRE(dab.size() == 1);
    REQUIRE(dba.size() == 1);
    CHECK(dab[0] == 3.0);
    CHECK(dba[0] == 3.0);
    CHECK(*hd95(a, b) == 3.0);

    Tensor same = a.detach();
    auto [daa, daa2] = surface_distances(a, same);
    for (double d : daa) CHECK(d == 0.0);
    for (double d : daa2) CHECK(d == 0.0);
    CHECK(*hd95(a, same) == 0.0);

    CHECK_THROWS_AS(surface_distances(a, Tensor::zeros({4, 4, 4})), EmptyMask);
}

TEST_CASE("hd95 empty conventions") {
    Tensor e = Tensor::zeros({3, 3, 3});
    Tensor f = Tensor::zeros({3, 3, 3});
    f.data()[0] = 1.0;
    CHECK(hd95(e, e) == 0.0);
    CHECK_FALSE(hd95(e, f).has_value());
    CHECK_FALSE(hd95(f, e).has_value());
}

TEST_CASE("hd95 equals the brute-force oracle") {
    SeededRng rng(77);
    int nonempty_pairs = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const int D = 3 + static_cast<int>(rng.uniform_int(10)); // up to 12
        const int H = 3 + static_cast<int>(rng.uniform_int(10));
        const int W = 3 + static_cast<int>(rng.uniform_int(10));
        Tensor a = random_mask(D, H, W, rng, 0.25);
        Tensor b = random_mask(D, H, W, rng, 0.25);
        auto mine = hd95(a, b);
        auto ref = hd95_bruteforce(a, b);
        REQUIRE(mine.has_value() == ref.has_value());
        if (mine) {
            CHECK(*mine == *ref); // exact
            CHECK(*mine >= 0.0);
            ++nonempty_pairs;
        }
    }
    CHECK(nonempty_pairs > 20);
}

TEST_CASE("hd95 never exceeds the max surface distance") {
    SeededRng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = random_mask(6, 6, 6, rng, 0.3);
        Tensor b = random_mask(6, 6, 6, rng, 0.3);
        if (!hd95(a, b).has_value()) continue;
        auto [dab, dba] = surface_distances(a, b);
        double mx = 0.0;
        for (double d : dab) mx = std::max(mx, d);
        for (double d : dba) mx = std::max(mx, d);
        CHECK(*hd95(a, b) <= mx + 1e-12);
    }
}

TEST_CASE("report aggregation over classes") {
    Tensor pred = Tensor::zeros({2, 3, 3, 3});
    Tensor gt = Tensor::zeros({2, 3, 3, 3});
    // class 0 agrees exactly; class 1 has an empty prediction vs nonempty gt
    for (int i = 0; i < 5; ++i) {
        pred.data()[i] = 1.0;
        gt.data()[i] = 1.0;
    }
    gt.data()[27 + 4] = 1.0;
    MetricReport r = evaluate_masks(pred, gt);
    REQUIRE(r.per_class.size() == 2);
    CHECK(r.per_class[0].dsc == 1.0);
    CHECK(r.per_class[0].hd95.has_value());
    CHECK_FALSE(r.per_class[1].hd95.has_value());
    CHECK(r.hd95_undefined_count == 1);
    CHECK(*r.hd95 == 0.0); // mean over defined entries only
    CHECK(r.dsc == Catch::Approx(0.5));
}
