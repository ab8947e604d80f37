#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fdiff/checkpoint.hpp"
#include "fdiff/metrics.hpp"
#include "fdiff/phantom.hpp"
#include "fdiff/volume_io.hpp"

using namespace fdiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "fdiff_io_test";
    fs::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("phantom generation is deterministic and nested") {
    PhantomConfig cfg;
    cfg.seed = 11;
    SeededRng r1(cfg.seed), r2(cfg.seed);
    VolumeRecord a = gen_phantom(cfg, r1);
    VolumeRecord b = gen_phantom(cfg, r2);
    CHECK(max_abs_diff(a.image, b.image) == 0.0);
    CHECK(max_abs_diff(a.label, b.label) == 0.0);

    REQUIRE(a.label.shape() == Shape{2, 16, 16, 16});
    REQUIRE(a.image.shape() == Shape{1, 16, 16, 16});

    // nesting: the core class is contained in the outer class
    const std::int64_t sp = 16 * 16 * 16;
    for (std::int64_t i = 0; i < sp; ++i)
        if (a.label.data()[sp + i] != 0.0) CHECK(a.label.data()[i] != 0.0);

    // labels binary, image in range
    for (std::int64_t i = 0; i < a.label.numel(); ++i) {
        const double v = a.label.data()[i];
        CHECK((v == 0.0 || v == 1.0));
    }
    for (std::int64_t i = 0; i < a.image.numel(); ++i) {
        CHECK(a.image.data()[i] >= 0.0);
        CHECK(a.image.data()[i] <= 1.0);
    }
}

TEST_CASE("degenerate blur and noise give a scaled crisp label image") {
    PhantomConfig cfg;
    cfg.boundary_sigma = 0.0;
    cfg.noise_level = 0.0;
    SeededRng rng(3);
    VolumeRecord rec = gen_phantom(cfg, rng);
    const double w = 0.7 / 2.0;
    const std::int64_t sp = 16 * 16 * 16;
    for (std::int64_t i = 0; i < sp; ++i) {
        const double expected = w * rec.label.data()[i] + w * rec.label.data()[sp + i];
        CHECK(rec.image.data()[i] == expected);
    }
}

TEST_CASE("phantom foreground volume stays within analytic ellipsoid bounds") {
    PhantomConfig cfg;
    cfg.grid = 16;
    cfg.blobs_min = 1;
    cfg.blobs_max = 2;
    cfg.radius_min = 3.0;
    cfg.radius_max = 5.0;
    const double pi = 3.14159265358979323846;
    const double vol_min = 4.0 / 3.0 * pi * std::pow(cfg.radius_min, 3);
    const double vol_max = 2.0 * 4.0 / 3.0 * pi * std::pow(cfg.radius_max, 3);
    SeededRng rng(1234);
    for (int trial = 0; trial < 10; ++trial) {
        VolumeRecord rec = gen_phantom(cfg, rng);
        std::int64_t fg = 0;
        const std::int64_t sp = 16 * 16 * 16;
        for (std::int64_t i = 0; i < sp; ++i) fg += rec.label.data()[i] != 0.0;
        CHECK(static_cast<double>(fg) > 0.5 * vol_min); // voxelization slack
        CHECK(static_cast<double>(fg) < 1.5 * vol_max);
    }
}

TEST_CASE("phantom config validation") {
    SeededRng rng(1);
    PhantomConfig bad;
    bad.radius_max = 20.0; // diameter exceeds grid 16
    CHECK_THROWS_AS(gen_phantom(bad, rng), InvalidConfig);
    PhantomConfig neg;
    neg.boundary_sigma = -1.0;
    CHECK_THROWS_AS(gen_phantom(neg, rng), InvalidConfig);
}

TEST_CASE("flip augmentation") {
    PhantomConfig cfg;
    SeededRng rng(7);
    VolumeRecord rec = gen_phantom(cfg, rng);

    SeededRng arng(5);
    VolumeRecord same = augment_flip(rec, {0, 1, 2}, arng, 0.0);
    CHECK(max_abs_diff(same.image, rec.image) == 0.0);

    // p=1 flips deterministically; applying it twice is the identity
    SeededRng frng(5);
    VolumeRecord once = augment_flip(rec, {1}, frng, 1.0);
    CHECK(max_abs_diff(once.image, rec.image) > 0.0);
    VolumeRecord twice = augment_flip(once, {1}, frng, 1.0);
    CHECK(max_abs_diff(twice.image, rec.image) == 0.0);
    CHECK(max_abs_diff(twice.label, rec.label) == 0.0);

    // labels stay binary and aligned with the image under flips
    for (std::int64_t i = 0; i < once.label.numel(); ++i) {
        const double v = once.label.data()[i];
        CHECK((v == 0.0 || v == 1.0));
    }
    const std::int64_t sp = 16 * 16 * 16;
    Tensor l0 = Tensor::from_data({16, 16, 16},
                                  std::vector<double>(rec.label.data(), rec.label.data() + sp));
    Tensor l2 = Tensor::from_data({16, 16, 16},
                                  std::vector<double>(twice.label.data(), twice.label.data() + sp));
    CHECK(dsc(l0, l2) == 1.0);
}

TEST_CASE("volume file round trip and header layout") {
    auto dir = temp_dir();
    PhantomConfig cfg;
    SeededRng rng(9);
    VolumeRecord rec = gen_phantom(cfg, rng);
    rec.id = "vol_test";

    const auto path = dir / "vol_test.fdfv";
    write_volume(rec, path);
    VolumeRecord loaded = read_volume(path);
    CHECK(max_abs_diff(loaded.image, rec.image) == 0.0); // f64 block is bit-exact
    CHECK(max_abs_diff(loaded.label, rec.label) == 0.0);
    CHECK(loaded.id == "vol_test");

    // byte-identical rewrite
    const auto path2 = dir / "vol_copy.fdfv";
    write_volume(loaded, path2);
    CHECK(file_bytes(path) == file_bytes(path2));

    // hand-assembled header for a 1x2x2x2 f32 image block
    VolumeRecord tiny;
    tiny.image = Tensor::from_data({1, 2, 2, 2}, {0, 0.5, 1, 0.25, 0.75, 0, 1, 0.5});
    tiny.label = Tensor::from_data({1, 2, 2, 2}, {0, 1, 0, 1, 0, 1, 0, 1});
    const auto tpath = dir / "tiny.fdfv";
    write_volume(tiny, tpath, Dtype::f32, Dtype::u8);
    auto bytes = file_bytes(tpath);
    const std::vector<std::uint8_t> expected_header = {
        'F', 'D', 'F', 'V',      // magic
        0x01, 0x00,              // version 1, little endian
        0x00,                    // dtype f32
        0x04,                    // ndim
        0x01, 0x00, 0x00, 0x00,  // dim 1
        0x02, 0x00, 0x00, 0x00,  // dim 2
        0x02, 0x00, 0x00, 0x00,  // dim 2
        0x02, 0x00, 0x00, 0x00}; // dim 2
    REQUIRE(bytes.size() > expected_header.size());
    for (std::size_t i = 0; i < expected_header.size(); ++i)
        CHECK(bytes[i] == expected_header[i]);

    // f32 round trip is bit-exact at float precision
    VolumeRecord tl = read_volume(tpath);
    for (std::int64_t i = 0; i < tiny.image.numel(); ++i)
        CHECK(tl.image.data()[i] == static_cast<double>(static_cast<float>(tiny.image.data()[i])));

    // corrupted magic is rejected
    bytes[0] = 'X';
    const auto bad = dir / "bad.fdfv";
    std::ofstream(bad, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(read_volume(bad), CorruptFile);

    // truncation is rejected
    auto full = file_bytes(path);
    full.resize(full.size() / 2);
    const auto trunc = dir / "trunc.fdfv";
    std::ofstream(trunc, std::ios::binary)
        .write(reinterpret_cast<const char*>(full.data()),
               static_cast<std::streamsize>(full.size()));
    CHECK_THROWS_AS(read_volume(trunc), CorruptFile);

    fs::remove_all(dir);
}

TEST_CASE("manifest splits") {
    std::vector<std::string> paths;
    for (int i = 0; i < 10; ++i) paths.push_back("vol_" + std::to_string(i) + ".fdfv");

    DatasetManifest m = make_manifest(paths, {0.7, 0.1, 0.2}, 42);
    CHECK(m.indices_of("train").size() == 7);
    CHECK(m.indices_of("val").size() == 1);
    CHECK(m.indices_of("test").size() == 2);

    // deterministic in the seed
    DatasetManifest m2 = make_manifest(paths, {0.7, 0.1, 0.2}, 42);
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        CHECK(m.entries[i].split == m2.entries[i].split);

    DatasetManifest all = make_manifest(paths, {1.0, 0.0, 0.0}, 1);
    CHECK(all.indices_of("train").size() == 10);

    CHECK_THROWS_AS(make_manifest(paths, {0.5, 0.3, 0.3}, 1), InvalidSplit);
    std::vector<std::string> two{"a.fdfv", "b.fdfv"};
    CHECK_THROWS_AS(make_manifest(two, {0.7, 0.1, 0.2}, 1), InvalidSplit);

    // JSON round trip
    auto dir = temp_dir();
    save_manifest(m, dir / "manifest.json");
    DatasetManifest loaded = load_manifest(dir / "manifest.json");
    REQUIRE(loaded.entries.size() == m.entries.size());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(loaded.entries[i].path == m.entries[i].path);
        CHECK(loaded.entries[i].split == m.entries[i].split);
    }
    fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
    auto dir = temp_dir();
    SeededRng rng(13);
    ParamMap params;
    params.add("layer.w", Tensor::gaussian({3, 2}, rng));
    params.add("layer.b", Tensor::gaussian({3}, rng));
    params.add("bn.running_var", Tensor::ones({4}));

    const auto path = dir / "ckpt.fdfw";
    save_fdfw(params, path);

    ParamMap loaded;
    loaded.add("layer.w", Tensor::zeros({3, 2}));
    loaded.add("layer.b", Tensor::zeros({3}));
    loaded.add("bn.running_var", Tensor::zeros({4}));
    load_fdfw(loaded, path);
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(max_abs_diff(params.items()[i].second, loaded.items()[i].second) == 0.0);

    // re-serialization is byte-identical
    const auto path2 = dir / "ckpt2.fdfw";
    save_fdfw(loaded, path2);
    CHECK(file_bytes(path) == file_bytes(path2));

    // wrong shape and unknown names are rejected
    ParamMap wrong;
    wrong.add("layer.w", Tensor::zeros({2, 2}));
    wrong.add("layer.b", Tensor::zeros({3}));
    wrong.add("bn.running_var", Tensor::zeros({4}));
    CHECK_THROWS_AS(load_fdfw(wrong, path), CorruptFile);

    ParamMap extra;
    extra.add("other", Tensor::zeros({1}));
    CHECK_THROWS_AS(load_fdfw(extra, path), CorruptFile);

    fs::remove_all(dir);
}

TEST_CASE("pgm slice export") {
    auto dir = temp_dir();
    Tensor vol = Tensor::zeros({1, 2, 2, 3});
    for (std::int64_t i = 0; i < vol.numel(); ++i)
        vol.data()[i] = static_cast<double>(i) / 11.0;
    write_slices_pgm(vol, dir, "probe");
    auto b0 = file_bytes(dir / "probe_z000.pgm");
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(b0.size() == header.size() + 6);
    CHECK(std::string(b0.begin(), b0.begin() + static_cast<long>(header.size())) == header);
    CHECK(b0[header.size()] == 0);                         // 0.0 -> 0
    CHECK(b0[header.size() + 5] == std::lround(5.0 / 11.0 * 255.0));
    fs::remove_all(dir);
}
