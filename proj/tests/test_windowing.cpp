#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "utsr/windowing.hpp"

using namespace utsr;

namespace {
Tensor randn(Shape shape, Rng& rng, bool rg = false) {
    std::vector<real> v(size_t(shape_numel(shape)));
    for (auto& x : v) x = real(rng.normal());
    return Tensor::from_data(std::move(shape), std::move(v), rg);
}
}  // namespace

TEST_CASE("window spec per the overlap formula") {
    WindowSpec s{4, 0.5};
    CHECK(s.po() == 6);
    CHECK(s.pad_lo() == 1);
    CHECK(s.pad_hi() == 1);
    WindowSpec z{4, 0.0};
    CHECK(z.po() == 4);
    CHECK(z.pad_lo() == 0);
    WindowSpec odd{4, 0.3};  // round(5.2) = 5, odd pad -> extra on the high side
    CHECK(odd.po() == 5);
    CHECK(odd.pad_lo() == 0);
    CHECK(odd.pad_hi() == 1);
}

TEST_CASE("window partition counts and inverse") {
    Rng rng(17);
    Tensor x = randn({3, 8, 8, 8}, rng);
    Tensor w = window_partition(x, 4);
    CHECK(w.shape() == Shape{8, 64, 3});  // 8^3 / 4^3 windows of 64 tokens

    Tensor back = window_reverse(w, 4, {8, 8, 8});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[size_t(i)] == x.data()[size_t(i)]);

    // degenerate single window is a (permuted) reshape
    Tensor w1 = window_partition(x, 8);
    CHECK(w1.shape() == Shape{1, 512, 3});

    CHECK_THROWS(window_partition(randn({1, 6, 8, 8}, rng), 4));
}

TEST_CASE("cyclic shift") {
    Rng rng(23);
    Tensor x = randn({2, 8, 8, 8}, rng);
    Tensor id = cyclic_shift(x, 0, 0, 0);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(id.data()[size_t(i)] == x.data()[size_t(i)]);
    Tensor back = cyclic_shift(cyclic_shift(x, 2, 2, 2), -2, -2, -2);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[size_t(i)] == x.data()[size_t(i)]);
}

TEST_CASE("overlapping partition") {
    Rng rng(31);
    Tensor x = randn({2, 8, 8, 8}, rng);
    WindowSpec spec{4, 0.5};
    Tensor ow = overlapping_partition(x, spec);
    CHECK(ow.shape() == Shape{8, 216, 2});  // 8 windows of 6^3 tokens

    // eps = 0 reduces to the plain partition
    Tensor z = overlapping_partition(x, WindowSpec{4, 0.0});
    Tensor w = window_partition(x, 4);
    REQUIRE(z.shape() == w.shape());
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.data()[size_t(i)] == w.data()[size_t(i)]);

    // coverage: every spatial position appears in at least one overlapping window
    auto idx = overlap_index({8, 8, 8}, spec);
    std::set<int64_t> seen(idx->begin(), idx->end());
    for (int64_t i = 0; i < 512; ++i) CHECK(seen.count(i) == 1);

    // key window w is centered on query window w: center of window 0 keys is
    // the center of its 4^3 query block
    // query window 0 spans [0,4)^3, key block spans [-1,5)^3 -> same center 1.5
    CHECK((*idx)[0] == -1);  // corner of the rim is padding
}

TEST_CASE("bias tables") {
    RelPosBiasTable wm = make_bias_wmsa(4, 4);
    CHECK(wm.table.shape() == Shape{4, 343});  // (2*4-1)^3
    CHECK(wm.nq == 64);
    CHECK(wm.nk == 64);
    CHECK(int64_t(wm.index->size()) == 64 * 64);
    Tensor b = build_bias(wm);
    CHECK(b.shape() == Shape{4, 64, 64});
    for (real v : b.data()) CHECK(v == real(0));  // zero table contributes nothing

    WindowSpec spec{4, 0.5};
    RelPosBiasTable ob = make_bias_oab(spec, 4);
    CHECK(ob.table.shape() == Shape{4, 729});  // (4+6-1)^3
    Tensor bo = build_bias(ob);
    CHECK(bo.shape() == Shape{4, 64, 216});

    // index map totality: every entry within the table
    for (int64_t i : *ob.index) CHECK((i >= 0 && i < 729));

    // translation consistency: shifting query and key token coordinates by
    // the same offset hits the same table cell
    auto at = [&](int q0, int q1, int q2, int k0, int k1, int k2) {
        return (*wm.index)[size_t((int64_t((q0 * 4 + q1) * 4 + q2)) * 64 + (k0 * 4 + k1) * 4 + k2)];
    };
    CHECK(at(0, 1, 2, 3, 2, 1) == at(0, 1, 1, 3, 2, 0));
    CHECK(at(1, 1, 1, 2, 2, 2) == at(0, 0, 0, 1, 1, 1));

    // gather is differentiable: gradient of sum(bias) counts occurrences
    backward(reduce_sum(build_bias(wm)));
    real total = 0;
    for (real g : wm.table.grad()) total += g;
    CHECK(total == doctest::Approx(4 * 64 * 64));
}

TEST_CASE("shift mask blocks cross-region pairs only") {
    Tensor m = shift_mask({8, 8, 8}, 4, 2);
    CHECK(m.shape() == Shape{8, 64, 64});
    // window 0 (away from the wrap seam after rolling): rolled coords
    // [0,4)^3 map to original [2,6)^3, all in region 0 on every axis... not
    // quite: region boundary at d-p=4. Check structural properties instead.
    for (real v : m.data()) CHECK((v == real(0) || v == real(-100)));
    // diagonal always unmasked
    for (int64_t w = 0; w < 8; ++w)
        for (int64_t q = 0; q < 64; ++q) CHECK(m.data()[size_t((w * 64 + q) * 64 + q)] == real(0));
    // symmetry
    for (int64_t w = 0; w < 8; ++w)
        for (int64_t q = 0; q < 64; ++q)
            for (int64_t k = 0; k < q; ++k)
                CHECK(m.data()[size_t((w * 64 + q) * 64 + k)] == m.data()[size_t((w * 64 + k) * 64 + q)]);
    // zero shift masks nothing
    Tensor z = shift_mask({8, 8, 8}, 4, 0);
    for (real v : z.data()) CHECK(v == real(0));
}
