#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utsr/losses.hpp"
#include "utsr/warp.hpp"

using namespace utsr;

namespace {

Tensor smooth_volume(int64_t n, uint64_t seed) {
    // band-limited: sum of a few low-frequency cosines
    Rng rng(seed);
    double a[3][4];
    for (auto& row : a)
        for (auto& v : row) v = rng.uniform(-1, 1);
    std::vector<real> d(size_t(n * n * n), 0);
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) {
                double v = 0;
                for (int k = 0; k < 3; ++k)
                    v += a[k][0] * std::cos(2 * M_PI * (a[k][1] * x + a[k][2] * y + a[k][3] * z) / double(n) +
                                            a[k][0]);
                d[size_t((z * n + y) * n + x)] = real(v);
            }
    return Tensor::from_data({1, n, n, n}, std::move(d));
}

Tensor const_field(int64_t n, real ux, real uy, real uz) {
    std::vector<real> d(size_t(3 * n * n * n), 0);
    const int64_t s = n * n * n;
    for (int64_t i = 0; i < s; ++i) {
        d[size_t(i)] = ux;
        d[size_t(s + i)] = uy;
        d[size_t(2 * s + i)] = uz;
    }
    return Tensor::from_data({3, n, n, n}, std::move(d));
}

}  // namespace

TEST_CASE("warp contracts") {
    const int64_t n = 6;
    Rng rng(5);
    std::vector<real> img(size_t(n * n * n), 0);
    for (auto& v : img) v = real(rng.normal());
    Tensor m = Tensor::from_data({1, n, n, n}, img);

    // zero field is bit-identity
    Tensor w0 = warp_trilinear(m, Tensor::zeros({3, n, n, n}));
    for (int64_t i = 0; i < m.numel(); ++i) CHECK(w0.data()[size_t(i)] == m.data()[size_t(i)]);

    // u = (1,0,0): out(x) = m(x+1) away from the high-x border
    Tensor w1 = warp_trilinear(m, const_field(n, 1, 0, 0));
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n - 1; ++x)
                CHECK(double(w1.data()[size_t((z * n + y) * n + x)]) ==
                      doctest::Approx(double(m.data()[size_t((z * n + y) * n + x + 1)])).epsilon(1e-5));

    // u = (0.5,0,0) on the ramp v(x,y,z) = x: out = x + 0.5 in the interior
    std::vector<real> ramp(size_t(n * n * n), 0);
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) ramp[size_t((z * n + y) * n + x)] = real(x);
    Tensor rv = Tensor::from_data({1, n, n, n}, ramp);
    Tensor wh = warp_trilinear(rv, const_field(n, real(0.5), 0, 0));
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n - 1; ++x)
                CHECK(double(wh.data()[size_t((z * n + y) * n + x)]) ==
                      doctest::Approx(double(x) + 0.5).epsilon(1e-5));

    CHECK_THROWS(warp_trilinear(m, Tensor::zeros({3, n, n, n + 1})));
}

TEST_CASE("warp linearity and composition sanity") {
    const int64_t n = 8;
    Rng rng(9);
    std::vector<real> a(size_t(n * n * n), 0), b(size_t(n * n * n), 0), fd(size_t(3 * n * n * n), 0);
    for (auto& v : a) v = real(rng.normal());
    for (auto& v : b) v = real(rng.normal());
    for (auto& v : fd) v = real(rng.uniform(-1.5, 1.5));
    Tensor m1 = Tensor::from_data({1, n, n, n}, a);
    Tensor m2 = Tensor::from_data({1, n, n, n}, b);
    Tensor f = Tensor::from_data({3, n, n, n}, fd);

    std::vector<real> comb(size_t(n * n * n), 0);
    for (size_t i = 0; i < comb.size(); ++i) comb[i] = 2 * a[i] - 3 * b[i];
    Tensor wc = warp_trilinear(Tensor::from_data({1, n, n, n}, comb), f);
    Tensor w1 = warp_trilinear(m1, f);
    Tensor w2 = warp_trilinear(m2, f);
    for (int64_t i = 0; i < wc.numel(); ++i)
        CHECK(double(wc.data()[size_t(i)]) ==
              doctest::Approx(2 * double(w1.data()[size_t(i)]) - 3 * double(w2.data()[size_t(i)]))
                  .epsilon(1e-4));

    // smooth volume, small smooth displacement: warp by u then -u lands near the original
    const int64_t ns = 16;
    Tensor sv = smooth_volume(ns, 3);
    real amp = real(0.7);
    Tensor uf = const_field(ns, amp, -amp, amp / 2);
    Tensor ub = const_field(ns, -amp, amp, -amp / 2);
    Tensor round_trip = warp_trilinear(warp_trilinear(sv, uf), ub);
    double linf = 0, scale = 0;
    for (real v : sv.data()) scale = std::max(scale, std::abs(double(v)));
    for (int64_t z = 2; z < ns - 2; ++z)
        for (int64_t y = 2; y < ns - 2; ++y)
            for (int64_t x = 2; x < ns - 2; ++x) {
                size_t i = size_t((z * ns + y) * ns + x);
                linf = std::max(linf, std::abs(double(round_trip.data()[i]) - double(sv.data()[i])));
            }
    CHECK(linf / scale < 0.05);
}

TEST_CASE("label warps") {
    LabelMask m;
    m.dims = {4, 4, 4};
    m.labels.assign(64, 0);
    m.labels[size_t((1 * 4 + 1) * 4 + 1)] = 2;  // voxel (x,y,z) = (1,1,1)
    DisplacementField zero;
    zero.dims = m.dims;
    zero.values.assign(3 * 64, 0.0f);
    LabelMask same = warp_labels(m, zero);
    CHECK(same.labels == m.labels);

    DisplacementField shift;  // u = (1,0,0): out(x) = m(x+1)
    shift.dims = m.dims;
    shift.values.assign(3 * 64, 0.0f);
    for (int i = 0; i < 64; ++i) shift.values[size_t(i)] = 1.0f;
    LabelMask sh = warp_labels(m, shift);
    CHECK(sh.labels[size_t((1 * 4 + 1) * 4 + 0)] == 2);
    for (uint8_t l : sh.labels) CHECK((l == 0 || l == 2));

    // one-hot trilinear warp: channels sum to <= 1 + 1e-5
    Rng rng(12);
    LabelMask rm;
    rm.dims = {5, 5, 5};
    rm.labels.resize(125);
    for (auto& l : rm.labels) l = uint8_t(rng.uniform_int(0, 3));
    Tensor oh = mask_to_onehot(rm, 3);
    std::vector<real> fv(size_t(3 * 125), 0);
    for (auto& v : fv) v = real(rng.uniform(-1.2, 1.2));
    Tensor woh = warp_trilinear(oh, Tensor::from_data({3, 5, 5, 5}, fv));
    for (int64_t p = 0; p < 125; ++p) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += double(woh.data()[size_t(k * 125 + p)]);
        CHECK(s <= 1.0 + 1e-5);
        CHECK(s >= -1e-6);
    }
}

TEST_CASE("lncc oracles") {
    Tensor f = smooth_volume(12, 21);
    CHECK(double(lncc_loss(f, f, 9).item()) == doctest::Approx(-1.0).epsilon(1e-3));

    // affine intensity invariance
    Tensor w = add(mul(f, real(2.3)), real(0.7));
    CHECK(double(lncc_loss(f, w, 9).item()) == doctest::Approx(-1.0).epsilon(1e-3));

    // independent noise on 21^3: near zero, and matches brute force
    const int64_t n = 21;
    Rng rng(77);
    std::vector<real> av(size_t(n * n * n), 0), bv(size_t(n * n * n), 0);
    for (auto& v : av) v = real(rng.normal());
    for (auto& v : bv) v = real(rng.normal());
    Tensor fa = Tensor::from_data({1, n, n, n}, av);
    Tensor fb = Tensor::from_data({1, n, n, n}, bv);
    double got = double(lncc_loss(fa, fb, 9).item());
    CHECK(std::abs(got) < 0.1);

    // brute-force per-cube evaluation
    double total = 0;
    const int r = 4;
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) {
                double sf = 0, sw = 0, sff = 0, sww = 0, sfw = 0;
                int64_t cnt = 0;
                for (int64_t a = std::max<int64_t>(0, z - r); a <= std::min(n - 1, z + r); ++a)
                    for (int64_t b = std::max<int64_t>(0, y - r); b <= std::min(n - 1, y + r); ++b)
                        for (int64_t c = std::max<int64_t>(0, x - r); c <= std::min(n - 1, x + r); ++c) {
                            double fv = av[size_t((a * n + b) * n + c)];
                            double wv = bv[size_t((a * n + b) * n + c)];
                            sf += fv;
                            sw += wv;
                            sff += fv * fv;
                            sww += wv * wv;
                            sfw += fv * wv;
                            ++cnt;
                        }
                double cross = sfw - sf * sw / double(cnt);
                double varf = sff - sf * sf / double(cnt);
                double varw = sww - sw * sw / double(cnt);
                total += cross * cross / (varf * varw + 1e-5);
            }
    double want = -total / double(n * n * n);
    CHECK(got == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("mi oracles") {
    // binary self pair: MI = ln 2
    const int64_t n = 16;
    std::vector<real> bv(size_t(n * n * n), 0);
    for (size_t i = 0; i < bv.size(); ++i) bv[i] = i % 2 ? real(1) : real(0);
    Tensor b = Tensor::from_data({1, n, n, n}, bv);
    double mi_self = -double(mi_loss(b, b, 32).item());
    CHECK(mi_self == doctest::Approx(std::log(2.0)).epsilon(0.08));

    // independent uniform noise: MI near zero
    Rng rng(13);
    std::vector<real> u1(size_t(32 * 32 * 32), 0), u2(size_t(32 * 32 * 32), 0);
    for (auto& v : u1) v = real(rng.uniform());
    for (auto& v : u2) v = real(rng.uniform());
    Tensor t1 = Tensor::from_data({1, 32, 32, 32}, u1);
    Tensor t2 = Tensor::from_data({1, 32, 32, 32}, u2);
    CHECK(std::abs(double(mi_loss(t1, t2, 32).item())) < 0.05);

    // symmetry
    Tensor s1 = smooth_volume(10, 5);
    Tensor s2 = smooth_volume(10, 6);
    auto to01 = [](Tensor t) {
        real lo = t.data()[0], hi = t.data()[0];
        for (real v : t.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return mul(add(t, -lo), real(1) / (hi - lo));
    };
    s1 = to01(s1);
    s2 = to01(s2);
    CHECK(double(mi_loss(s1, s2).item()) == doctest::Approx(double(mi_loss(s2, s1).item())).epsilon(1e-6));
}

TEST_CASE("diffusion oracles") {
    const int64_t n = 6;
    CHECK(double(diffusion_loss(Tensor::zeros({3, n, n, n})).item()) == 0.0);

    // unit ramp in channel 0 along x -> exactly 1/9
    std::vector<real> fv(size_t(3 * n * n * n), 0);
    for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) fv[size_t((z * n + y) * n + x)] = real(x);
    Tensor ramp = Tensor::from_data({3, n, n, n}, fv);
    CHECK(double(diffusion_loss(ramp).item()) == doctest::Approx(1.0 / 9.0).epsilon(1e-6));

    // adding a constant changes nothing
    Tensor shifted = add(ramp, real(17.5));
    CHECK(double(diffusion_loss(shifted).item()) ==
          doctest::Approx(double(diffusion_loss(ramp).item())).epsilon(1e-6));

    // finite-difference oracle on random data
    Rng rng(31);
    std::vector<real> rv(size_t(3 * 4 * 4 * 4), 0);
    for (auto& v : rv) v = real(rng.normal());
    Tensor rf = Tensor::from_data({3, 4, 4, 4}, rv);
    double want = 0;
    auto at = [&](int c, int64_t z, int64_t y, int64_t x) {
        return double(rv[size_t(((c * 4 + z) * 4 + y) * 4 + x)]);
    };
    for (int c = 0; c < 3; ++c) {
        double mz = 0, my = 0, mx = 0;
        for (int64_t z = 0; z < 4; ++z)
            for (int64_t y = 0; y < 4; ++y)
                for (int64_t x = 0; x < 4; ++x) {
                    if (z < 3) mz += std::pow(at(c, z + 1, y, x) - at(c, z, y, x), 2);
                    if (y < 3) my += std::pow(at(c, z, y + 1, x) - at(c, z, y, x), 2);
                    if (x < 3) mx += std::pow(at(c, z, y, x + 1) - at(c, z, y, x), 2);
                }
        want += mz / 48 + my / 48 + mx / 48;  // 3*4*4 valid positions each
    }
    want /= 9;
    CHECK(double(diffusion_loss(rf).item()) == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("dice loss oracles") {
    const int64_t n = 4;
    Rng rng(2);
    LabelMask m;
    m.dims = {n, n, n};
    m.labels.resize(size_t(n * n * n));
    for (auto& l : m.labels) l = uint8_t(rng.uniform_int(0, 2));
    Tensor oh = mask_to_onehot(m, 2);
    CHECK(double(dice_seg_loss(oh, oh).item()) == doctest::Approx(0.0).epsilon(1e-5));

    // disjoint single-label masks
    std::vector<real> a(size_t(n * n * n), 0), b2(size_t(n * n * n), 0);
    a[0] = 1;
    b2[1] = 1;
    Tensor ta = Tensor::from_data({1, n, n, n}, a);
    Tensor tb = Tensor::from_data({1, n, n, n}, b2);
    CHECK(double(dice_seg_loss(ta, tb).item()) == doctest::Approx(1.0).epsilon(1e-5));

    // half-overlapping 8-voxel cubes sharing 4 voxels -> 0.5
    std::vector<real> c1(size_t(4 * 4 * 4), 0), c2(size_t(4 * 4 * 4), 0);
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t y = 0; y < 2; ++y)
            for (int64_t x = 0; x < 2; ++x) {
                c1[size_t((z * 4 + y) * 4 + x)] = 1;          // cube at x in [0,2)
                c2[size_t((z * 4 + y) * 4 + x + 1)] = 1;      // cube at x in [1,3)
            }
    Tensor t1 = Tensor::from_data({1, 4, 4, 4}, c1);
    Tensor t2 = Tensor::from_data({1, 4, 4, 4}, c2);
    CHECK(std::abs(double(dice_seg_loss(t1, t2).item()) - 0.5) < 1e-6);

    CHECK_THROWS(dice_seg_loss(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 2, 3})));
}

TEST_CASE("total loss composition") {
    Tensor f = smooth_volume(12, 8);
    LossConfig cfg;
    cfg.lambda = 0;
    LossTerms t0 = total_loss(f, f, Tensor::zeros({3, 12, 12, 12}), Tensor(), Tensor(), cfg);
    CHECK(double(t0.total.item()) == doctest::Approx(-1.0).epsilon(1e-3));

    // a rough field strictly increases the total when lambda = 1
    cfg.lambda = 1;
    Rng rng(4);
    std::vector<real> rough(size_t(3 * 12 * 12 * 12), 0);
    for (auto& v : rough) v = real(rng.uniform(-0.8, 0.8));
    LossTerms tz = total_loss(f, f, Tensor::zeros({3, 12, 12, 12}), Tensor(), Tensor(), cfg);
    LossTerms tr = total_loss(f, f, Tensor::from_data({3, 12, 12, 12}, rough), Tensor(), Tensor(), cfg);
    CHECK(double(tr.total.item()) > double(tz.total.item()));

    // use_seg without masks rejected
    cfg.use_seg = true;
    CHECK_THROWS(total_loss(f, f, Tensor::zeros({3, 12, 12, 12}), Tensor(), Tensor(), cfg));

    // MI path runs and improves for aligned identical volumes vs misaligned
    LossConfig mi;
    mi.sim_kind = LossConfig::Sim::mi;
    mi.lambda = 0;
    LossTerms aligned = total_loss(f, f, Tensor::zeros({3, 12, 12, 12}), Tensor(), Tensor(), mi);
    LossTerms off = total_loss(f, f, const_field(12, 3, -2, 1), Tensor(), Tensor(), mi);
    CHECK(double(aligned.total.item()) < double(off.total.item()));
}
