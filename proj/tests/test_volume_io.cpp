#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "utsr/volume_io.hpp"

using namespace utsr;
namespace fs = std::filesystem;

namespace {
std::string tmpdir() {
    static std::string d = [] {
        auto p = fs::temp_directory_path() / "utsr_io_test";
        fs::create_directories(p);
        return p.string();
    }();
    return d;
}
}  // namespace

TEST_CASE("volume round trip is byte exact") {
    Rng rng(42);
    Volume v;
    v.dims = {8, 8, 8};
    v.spacing = {1.0, 1.5, 2.0};
    v.values.resize(512);
    for (auto& x : v.values) x = float(rng.normal());
    std::string base = tmpdir() + "/vol";
    write_volume(v, base);
    Volume r = read_volume(base);
    CHECK(r.dims == v.dims);
    CHECK(r.spacing == v.spacing);
    CHECK(std::memcmp(r.values.data(), v.values.data(), 512 * 4) == 0);

    // writing the reread volume produces an identical raw file
    write_volume(r, base + "_2");
    std::ifstream a(base + ".raw", std::ios::binary), b(base + "_2.raw", std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
}

TEST_CASE("field raw size arithmetic") {
    DisplacementField f;
    f.dims = {2, 2, 2};
    f.values.assign(2 * 2 * 2 * 3, 0.25f);
    std::string base = tmpdir() + "/field";
    write_field(f, base);
    CHECK(fs::file_size(base + ".raw") == 96);  // 2*2*2*3*4
    DisplacementField r = read_field(base);
    CHECK(r.values == f.values);
}

TEST_CASE("truncated raw rejected with byte counts") {
    Volume v;
    v.dims = {4, 4, 4};
    v.values.assign(64, 1.0f);
    std::string base = tmpdir() + "/trunc";
    write_volume(v, base);
    fs::resize_file(base + ".raw", 100);
    CHECK_THROWS_WITH_AS(read_volume(base), doctest::Contains("expected 256"), std::runtime_error);
}

TEST_CASE("layout invariant on exhaustive 2x2x2x2 data") {
    // value at (c,x,y,z) lives at raw index ((c*Z+z)*Y+y)*X+x
    DisplacementField f;
    f.dims = {2, 2, 2};
    f.values.resize(24);
    for (int c = 0; c < 3; ++c)
        for (int z = 0; z < 2; ++z)
            for (int y = 0; y < 2; ++y)
                for (int x = 0; x < 2; ++x)
                    f.values[size_t(((c * 2 + z) * 2 + y) * 2 + x)] = float(1000 * c + 100 * x + 10 * y + z);
    std::string base = tmpdir() + "/layout";
    write_field(f, base);
    std::ifstream in(base + ".raw", std::ios::binary);
    std::vector<float> raw(24);
    in.read(reinterpret_cast<char*>(raw.data()), 96);
    for (int c = 0; c < 3; ++c)
        for (int z = 0; z < 2; ++z)
            for (int y = 0; y < 2; ++y)
                for (int x = 0; x < 2; ++x)
                    CHECK(raw[size_t(((c * 2 + z) * 2 + y) * 2 + x)] == float(1000 * c + 100 * x + 10 * y + z));

    // tensor bridge preserves the layout: tensor is [C, Z, Y, X]
    Tensor t = field_to_tensor(f);
    CHECK(t.shape() == Shape{3, 2, 2, 2});
    CHECK(t.data()[size_t(((1 * 2 + 1) * 2 + 0) * 2 + 1)] == real(1000 + 100 + 0 + 1));
}

TEST_CASE("masks and one-hot") {
    LabelMask m;
    m.dims = {2, 2, 2};
    m.labels = {0, 1, 2, 0, 1, 0, 0, 2};
    std::string base = tmpdir() + "/mask";
    write_mask(m, base);
    LabelMask r = read_mask(base);
    CHECK(r.labels == m.labels);

    Tensor oh = mask_to_onehot(m, 2);
    CHECK(oh.shape() == Shape{2, 2, 2, 2});
    CHECK(oh.data()[1] == real(1));   // label 1 at voxel 1 -> channel 0
    CHECK(oh.data()[size_t(8 + 2)] == real(1));  // label 2 at voxel 2 -> channel 1
    CHECK(oh.data()[0] == real(0));
    CHECK_THROWS(mask_to_onehot(m, 1));  // label 2 outside declared set
}

TEST_CASE("landmark CSV") {
    LandmarkSet lm;
    lm.names = {"apex", "hilum"};
    lm.positions_mm = {{1.5, 2.5, 3.5}, {-1, 0, 4}};
    std::string p = tmpdir() + "/lm.csv";
    write_landmarks(lm, p);
    LandmarkSet r = read_landmarks(p);
    CHECK(r.names == lm.names);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(r.positions_mm[size_t(i)][size_t(j)] == doctest::Approx(lm.positions_mm[size_t(i)][size_t(j)]));

    std::ofstream bad(tmpdir() + "/dup.csv");
    bad << "name,x_mm,y_mm,z_mm\na,1,2,3\na,4,5,6\n";
    bad.close();
    CHECK_THROWS_WITH_AS(read_landmarks(tmpdir() + "/dup.csv"), doctest::Contains("duplicate"),
                         std::runtime_error);
}

TEST_CASE("voxel/mm conversion") {
    std::array<double, 3> sp{1, 2, 0.5};
    auto mm = voxel_to_mm({2, 3, 4}, sp);
    CHECK(mm[0] == doctest::Approx(2));
    CHECK(mm[1] == doctest::Approx(6));
    CHECK(mm[2] == doctest::Approx(2));
    auto z = voxel_to_mm({0, 0, 0}, sp);
    CHECK(z == std::array<double, 3>{0, 0, 0});
    auto back = mm_to_voxel(mm, sp);
    for (int i = 0; i < 3; ++i) CHECK(back[size_t(i)] == doctest::Approx(double(i) + 2).epsilon(1e-6));
}

TEST_CASE("checkpoint round trip") {
    Checkpoint ck;
    ck.entries.push_back({"enc.w", {2, 3}, {1, 2, 3, 4, 5, 6}});
    ck.entries.push_back({"head.b", {3}, {-1, 0, 1}});
    std::string base = tmpdir() + "/ckpt";
    write_checkpoint(ck, base);
    Checkpoint r = read_checkpoint(base);
    REQUIRE(r.entries.size() == 2);
    CHECK(r.entries[0].name == "enc.w");
    CHECK(r.entries[0].shape == Shape{2, 3});
    CHECK(r.entries[0].data == ck.entries[0].data);
    CHECK(r.entries[1].data == ck.entries[1].data);
    CHECK(fs::file_size(base + ".raw") == 9 * 4);
}
