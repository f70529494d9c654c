#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <json.hpp>

#include "utsr/metrics.hpp"

using namespace utsr;

namespace {

LabelMask make_mask(std::array<int64_t, 3> dims, const std::vector<uint8_t>& labels) {
    LabelMask m;
    m.dims = dims;
    m.labels = labels;
    return m;
}

// independent oracles on small masks
double brute_dice(const LabelMask& a, const LabelMask& b, int l) {
    int64_t na = 0, nb = 0, both = 0;
    for (size_t i = 0; i < a.labels.size(); ++i) {
        na += a.labels[i] == l;
        nb += b.labels[i] == l;
        both += a.labels[i] == l && b.labels[i] == l;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(both) / double(na + nb);
}

std::vector<std::array<double, 3>> brute_boundary(const LabelMask& m, int l) {
    const int64_t X = m.dims[0], Y = m.dims[1], Z = m.dims[2];
    std::vector<std::array<double, 3>> out;
    auto in = [&](int64_t x, int64_t y, int64_t z) {
        if (x < 0 || y < 0 || z < 0 || x >= X || y >= Y || z >= Z) return false;
        return int(m.labels[size_t((z * Y + y) * X + x)]) == l;
    };
    const int64_t d6[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int64_t z = 0; z < Z; ++z)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t x = 0; x < X; ++x) {
                if (!in(x, y, z)) continue;
                for (const auto& d : d6)
                    if (!in(x + d[0], y + d[1], z + d[2])) {
                        out.push_back({double(x), double(y), double(z)});
                        break;
                    }
            }
    return out;
}

double brute_hd95(const LabelMask& a, const LabelMask& b, int l, std::array<double, 3> sp) {
    auto ba = brute_boundary(a, l), bb = brute_boundary(b, l);
    std::vector<double> pool;
    auto push = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = 1e300;
            for (const auto& q : to)
                best = std::min(best, std::pow((p[0] - q[0]) * sp[0], 2) +
                                          std::pow((p[1] - q[1]) * sp[1], 2) +
                                          std::pow((p[2] - q[2]) * sp[2], 2));
            pool.push_back(std::sqrt(best));
        }
    };
    push(ba, bb);
    push(bb, ba);
    std::sort(pool.begin(), pool.end());
    double h = 0.95 * double(pool.size() - 1);
    size_t lo = size_t(h);
    if (lo + 1 >= pool.size()) return pool.back();
    return pool[lo] + (pool[lo + 1] - pool[lo]) * (h - double(lo));
}

DisplacementField affine_field(std::array<int64_t, 3> dims, const double A[3][3]) {
    DisplacementField f;
    f.dims = dims;
    f.values.resize(size_t(3 * f.voxels()), 0.0f);
    const int64_t X = dims[0], Y = dims[1], Z = dims[2], S = f.voxels();
    for (int64_t z = 0; z < Z; ++z)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t x = 0; x < X; ++x) {
                double p[3] = {double(x), double(y), double(z)};
                for (int c = 0; c < 3; ++c)
                    f.values[size_t(c * S + (z * Y + y) * X + x)] =
                        float(A[c][0] * p[0] + A[c][1] * p[1] + A[c][2] * p[2]);
            }
    return f;
}

}  // namespace

TEST_CASE("dice oracles") {
    LabelMask a = make_mask({4, 4, 4}, std::vector<uint8_t>(64, 0));
    for (int i = 0; i < 8; ++i) a.labels[size_t(i)] = 1;
    DiceResult same = dice(a, a, {1});
    CHECK(same.per_label[1] == 1.0);

    LabelMask b = a;
    std::fill(b.labels.begin(), b.labels.end(), uint8_t(0));
    for (int i = 8; i < 16; ++i) b.labels[size_t(i)] = 1;
    CHECK(dice(a, b, {1}).per_label[1] == 0.0);

    // 8-voxel cubes sharing 4 voxels
    LabelMask c1 = make_mask({4, 4, 4}, std::vector<uint8_t>(64, 0));
    LabelMask c2 = c1;
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t y = 0; y < 2; ++y)
            for (int64_t x = 0; x < 2; ++x) {
                c1.labels[size_t((z * 4 + y) * 4 + x)] = 1;
                c2.labels[size_t((z * 4 + y) * 4 + x + 1)] = 1;
            }
    CHECK(dice(c1, c2, {1}).per_label[1] == 0.5);

    // empty-empty convention and mean
    DiceResult r = dice(c1, c2, {1, 2});
    CHECK(r.per_label[2] == 1.0);
    CHECK(r.mean == doctest::Approx(0.75));

    LabelMask wrong = make_mask({4, 4, 2}, std::vector<uint8_t>(32, 0));
    CHECK_THROWS(dice(a, wrong, {1}));
}

TEST_CASE("hd95 oracles") {
    LabelMask a = make_mask({8, 8, 8}, std::vector<uint8_t>(512, 0));
    for (int64_t z = 2; z < 5; ++z)
        for (int64_t y = 2; y < 5; ++y)
            for (int64_t x = 2; x < 5; ++x) a.labels[size_t((z * 8 + y) * 8 + x)] = 1;
    CHECK(hd95(a, a, 1, {1, 1, 1}) == 0.0);

    // two single voxels 3 apart
    LabelMask p1 = make_mask({8, 8, 8}, std::vector<uint8_t>(512, 0));
    LabelMask p2 = p1;
    p1.labels[size_t((4 * 8 + 4) * 8 + 1)] = 1;
    p2.labels[size_t((4 * 8 + 4) * 8 + 4)] = 1;
    CHECK(hd95(p1, p2, 1, {1, 1, 1}) == doctest::Approx(3.0));

    // cube translated by one voxel in x
    LabelMask b = make_mask({8, 8, 8}, std::vector<uint8_t>(512, 0));
    for (int64_t z = 2; z < 5; ++z)
        for (int64_t y = 2; y < 5; ++y)
            for (int64_t x = 3; x < 6; ++x) b.labels[size_t((z * 8 + y) * 8 + x)] = 1;
    CHECK(hd95(a, b, 1, {1, 1, 1}) == doctest::Approx(1.0));

    // spacing scales distances
    CHECK(hd95(p1, p2, 1, {2, 1, 1}) == doctest::Approx(6.0));

    CHECK_THROWS_WITH_AS(hd95(a, make_mask({8, 8, 8}, std::vector<uint8_t>(512, 0)), 1, {1, 1, 1}),
                         doctest::Contains("second mask"), std::runtime_error);
}

TEST_CASE("randomized dice/hd95 against brute force") {
    Rng rng(123);
    int hd_cases = 0;
    for (int trial = 0; trial < 300; ++trial) {
        std::array<int64_t, 3> dims{rng.uniform_int(2, 6), rng.uniform_int(2, 6), rng.uniform_int(2, 6)};
        int64_t n = dims[0] * dims[1] * dims[2];
        LabelMask a = make_mask(dims, std::vector<uint8_t>(size_t(n) + 0, 0));
        LabelMask b = a;
        for (auto& l : a.labels) l = uint8_t(rng.uniform_int(0, 2));
        for (auto& l : b.labels) l = uint8_t(rng.uniform_int(0, 2));
        for (int l = 1; l <= 2; ++l) {
            CHECK(dice(a, b, {l}).per_label[l] == doctest::Approx(brute_dice(a, b, l)).epsilon(1e-12));
            bool in_a = std::count(a.labels.begin(), a.labels.end(), uint8_t(l)) > 0;
            bool in_b = std::count(b.labels.begin(), b.labels.end(), uint8_t(l)) > 0;
            if (in_a && in_b) {
                CHECK(hd95(a, b, l, {1, 1, 1}) == doctest::Approx(brute_hd95(a, b, l, {1, 1, 1})));
                ++hd_cases;
            }
        }
    }
    CHECK(hd_cases > 200);
}

TEST_CASE("jacobian stats oracles") {
    DisplacementField zero;
    zero.dims = {6, 6, 6};
    zero.values.assign(3 * 216, 0.0f);
    JacobianStats z = jacobian_stats(zero);
    CHECK(z.fold_fraction == 0.0);
    CHECK(z.sdlogj == 0.0);

    double dil[3][3] = {{0.1, 0, 0}, {0, 0.1, 0}, {0, 0, 0.1}};
    JacobianStats d = jacobian_stats(affine_field({6, 6, 6}, dil));
    CHECK(d.fold_fraction == 0.0);
    CHECK(d.sdlogj == doctest::Approx(0.0).epsilon(1e-6));

    double refl[3][3] = {{-2, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    JacobianStats r = jacobian_stats(affine_field({6, 6, 6}, refl));
    CHECK(r.fold_fraction == 1.0);

    // shear: det(I+A) = 1 exactly, log det 0 everywhere
    double shear[3][3] = {{0, 0.3, 0}, {0, 0, 0}, {0, 0, 0}};
    JacobianStats s = jacobian_stats(affine_field({6, 6, 6}, shear));
    CHECK(s.fold_fraction == 0.0);
    CHECK(s.sdlogj == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("tre and landmark warping") {
    LandmarkSet f, w;
    f.names = {"a", "b"};
    f.positions_mm = {{0, 0, 0}, {10, 10, 10}};
    w = f;
    TreResult zero = tre(f, w);
    CHECK(zero.mean == 0.0);

    w.positions_mm = {{3, 0, 0}, {13, 10, 10}};
    TreResult off = tre(f, w);
    CHECK(off.mean == doctest::Approx(3.0));
    CHECK(off.sd == doctest::Approx(0.0));

    w.positions_mm = {{3, 4, 0}, {10, 10, 10}};
    TreResult mix = tre(f, w);
    CHECK(mix.per_landmark[0].second == doctest::Approx(5.0));

    LandmarkSet bad;
    bad.names = {"a", "c"};
    bad.positions_mm = w.positions_mm;
    CHECK_THROWS_WITH_AS(tre(f, bad), doctest::Contains("c"), std::runtime_error);

    DisplacementField field;
    field.dims = {8, 8, 8};
    field.spacing = {2, 1, 1};
    field.values.assign(3 * 512, 0.0f);
    LandmarkSet m;
    m.names = {"p"};
    m.positions_mm = {{6, 3, 3}};
    LandmarkSet same = warp_landmarks(m, field);
    CHECK(same.positions_mm[0][0] == doctest::Approx(6.0));

    for (int i = 0; i < 512; ++i) field.values[size_t(i)] = 1.0f;  // u_x = 1 voxel = 2 mm
    LandmarkSet pushed = warp_landmarks(m, field);
    CHECK(pushed.positions_mm[0][0] == doctest::Approx(8.0));
    CHECK(pushed.positions_mm[0][1] == doctest::Approx(3.0));
}

TEST_CASE("wilcoxon rank sum") {
    std::vector<double> same{2, 2, 2};
    RankSumResult t = wilcoxon_rank_sum(same, same);
    CHECK(t.p_value == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(t.statistic == 0.0);

    RankSumResult sep = wilcoxon_rank_sum({1, 2, 3}, {4, 5, 6});
    CHECK(sep.p_value == doctest::Approx(0.1).epsilon(1e-12));
    RankSumResult swp = wilcoxon_rank_sum({4, 5, 6}, {1, 2, 3});
    CHECK(swp.p_value == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(swp.statistic == doctest::Approx(-sep.statistic));

    // exact vs normal-approximation agreement at n + m = 10, exhaustive over
    // every achievable statistic in the decision-relevant tail (exact
    // p <= 0.1; in the body of the distribution no normal approximation gets
    // within 0.02 of the exact discrete p at this sample size)
    for (int n = 1; n <= 9; ++n) {
        const int m10 = 10 - n;
        // place the x-sample at each possible rank combination via values
        std::vector<size_t> idx(size_t(n) + 0);
        for (int i = 0; i < n; ++i) idx[size_t(i)] = size_t(i);
        while (true) {
            std::vector<double> x, y;
            size_t k = 0;
            for (size_t r = 0; r < 10; ++r) {
                bool in_x = k < idx.size() && idx[k] == r;
                (in_x ? x : y).push_back(double(r));
                if (in_x) ++k;
            }
            RankSumResult r = wilcoxon_rank_sum(x, y);
            double p_norm = std::erfc(std::abs(r.statistic) / std::sqrt(2.0));
            if (r.p_value <= 0.1) CHECK(std::abs(r.p_value - p_norm) < 0.02);
            size_t j = idx.size();
            while (j > 0 && idx[j - 1] == size_t(10 - n) + j - 1) --j;
            if (j == 0) break;
            ++idx[j - 1];
            for (size_t i = j; i < idx.size(); ++i) idx[i] = idx[i - 1] + 1;
        }
        (void)m10;
    }

    // large-sample path: clearly separated samples -> tiny p
    std::vector<double> lo, hi;
    for (int i = 0; i < 20; ++i) {
        lo.push_back(i);
        hi.push_back(100 + i);
    }
    CHECK(wilcoxon_rank_sum(lo, hi).p_value < 1e-6);
    CHECK_THROWS(wilcoxon_rank_sum({}, {1.0}));
}

TEST_CASE("evaluation report json") {
    DiceResult d;
    d.per_label[1] = 0.8;
    d.per_label[2] = 0.6;
    d.mean = 0.7;
    std::map<int, double> hd{{1, 2.5}};
    JacobianStats js{0.015, 0.12};
    TreResult t;
    t.mean = 1.5;
    t.sd = 0.5;
    auto j = nlohmann::json::parse(eval_report_json(&d, &hd, &js, &t));
    CHECK(j["dsc"]["1"] == doctest::Approx(0.8));
    CHECK(j["dsc_mean"] == doctest::Approx(0.7));
    CHECK(j["hd95"]["1"] == doctest::Approx(2.5));
    CHECK(j["fold_pct"] == doctest::Approx(1.5));
    CHECK(j["sdlogj"] == doctest::Approx(0.12));
    CHECK(j["tre_mean"] == doctest::Approx(1.5));

    auto partial = nlohmann::json::parse(eval_report_json(&d, nullptr, nullptr, nullptr));
    CHECK(!partial.contains("hd95"));
}
