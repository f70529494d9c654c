#include "utsr/windowing.hpp"

#include <cmath>

namespace utsr {

namespace {
void check_divisible(const Shape& spatial, int p) {
    const char* axis_name[3] = {"D0", "D1", "D2"};
    UTSR_REQUIRE(spatial.size() == 3, "window geometry expects 3 spatial extents");
    for (int i = 0; i < 3; ++i)
        UTSR_REQUIRE(spatial[size_t(i)] % p == 0, std::string("extent ") + axis_name[i] + "=" +
                                                      std::to_string(spatial[size_t(i)]) +
                                                      " not divisible by window " + std::to_string(p));
}
}  // namespace

std::shared_ptr<std::vector<int64_t>> window_index(const Shape& spatial, int p) {
    check_divisible(spatial, p);
    const int64_t d0 = spatial[0], d1 = spatial[1], d2 = spatial[2];
    const int64_t w0 = d0 / p, w1 = d1 / p, w2 = d2 / p;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(size_t(w0 * w1 * w2 * p * p * p));
    for (int64_t a = 0; a < w0; ++a)
        for (int64_t b = 0; b < w1; ++b)
            for (int64_t c = 0; c < w2; ++c)
                for (int64_t t0 = 0; t0 < p; ++t0)
                    for (int64_t t1 = 0; t1 < p; ++t1)
                        for (int64_t t2 = 0; t2 < p; ++t2)
                            idx->push_back(((a * p + t0) * d1 + b * p + t1) * d2 + c * p + t2);
    return idx;
}

std::shared_ptr<std::vector<int64_t>> overlap_index(const Shape& spatial, const WindowSpec& spec) {
    check_divisible(spatial, spec.p);
    const int64_t d0 = spatial[0], d1 = spatial[1], d2 = spatial[2];
    const int p = spec.p, po = spec.po(), lo = spec.pad_lo();
    const int64_t w0 = d0 / p, w1 = d1 / p, w2 = d2 / p;
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(size_t(w0 * w1 * w2) * size_t(po * po * po));
    for (int64_t a = 0; a < w0; ++a)
        for (int64_t b = 0; b < w1; ++b)
            for (int64_t c = 0; c < w2; ++c)
                for (int64_t t0 = 0; t0 < po; ++t0) {
                    int64_t i0 = a * p - lo + t0;
                    for (int64_t t1 = 0; t1 < po; ++t1) {
                        int64_t i1 = b * p - lo + t1;
                        for (int64_t t2 = 0; t2 < po; ++t2) {
                            int64_t i2 = c * p - lo + t2;
                            bool in = i0 >= 0 && i0 < d0 && i1 >= 0 && i1 < d1 && i2 >= 0 && i2 < d2;
                            idx->push_back(in ? (i0 * d1 + i1) * d2 + i2 : -1);
                        }
                    }
                }
    return idx;
}

Tensor window_partition(const Tensor& x, int p) {
    UTSR_REQUIRE(x.ndim() == 4, "window_partition: expects [C, D0, D1, D2]");
    Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
    auto idx = window_index(spatial, p);
    const int64_t tokens = int64_t(p) * p * p;
    const int64_t num_win = int64_t(idx->size()) / tokens;
    return to_windows(reshape(x, {x.dim(0), shape_numel(spatial)}), idx, num_win, tokens);
}

Tensor window_reverse(const Tensor& win, int p, const Shape& spatial) {
    auto idx = window_index(spatial, p);
    return from_windows(win, idx, spatial);
}

Tensor overlapping_partition(const Tensor& x, const WindowSpec& spec) {
    UTSR_REQUIRE(x.ndim() == 4, "overlapping_partition: expects [C, D0, D1, D2]");
    Shape spatial{x.dim(1), x.dim(2), x.dim(3)};
    auto idx = overlap_index(spatial, spec);
    const int64_t tokens = int64_t(spec.po()) * spec.po() * spec.po();
    const int64_t num_win = int64_t(idx->size()) / tokens;
    return to_windows(reshape(x, {x.dim(0), shape_numel(spatial)}), idx, num_win, tokens);
}

Tensor cyclic_shift(const Tensor& x, int s0, int s1, int s2) { return roll3d(x, s0, s1, s2); }

namespace {

RelPosBiasTable make_table(int p, int po, int lo, int hi, int heads) {
    RelPosBiasTable t;
    const int span = p + po - 1;  // offsets per axis: [-(p-1+hi), p-1+lo]
    t.table_size = int64_t(span) * span * span;
    t.nq = int64_t(p) * p * p;
    t.nk = int64_t(po) * po * po;
    t.table = Tensor::zeros({heads, t.table_size}, true);
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(size_t(t.nq * t.nk));
    for (int q0 = 0; q0 < p; ++q0)
        for (int q1 = 0; q1 < p; ++q1)
            for (int q2 = 0; q2 < p; ++q2)
                for (int k0 = 0; k0 < po; ++k0)
                    for (int k1 = 0; k1 < po; ++k1)
                        for (int k2 = 0; k2 < po; ++k2) {
                            // key grid position relative to the query window origin
                            int i0 = q0 - (k0 - lo) + p - 1 + hi;
                            int i1 = q1 - (k1 - lo) + p - 1 + hi;
                            int i2 = q2 - (k2 - lo) + p - 1 + hi;
                            UTSR_REQUIRE(i0 >= 0 && i0 < span && i1 >= 0 && i1 < span && i2 >= 0 && i2 < span,
                                         "bias index out of table range");
                            idx->push_back((int64_t(i0) * span + i1) * span + i2);
                        }
    t.index = idx;
    return t;
}

}  // namespace

RelPosBiasTable make_bias_wmsa(int p, int heads) { return make_table(p, p, 0, 0, heads); }

RelPosBiasTable make_bias_oab(const WindowSpec& spec, int heads) {
    return make_table(spec.p, spec.po(), spec.pad_lo(), spec.pad_hi(), heads);
}

Tensor build_bias(const RelPosBiasTable& t) {
    const int64_t heads = t.table.dim(0), n = t.nq * t.nk;
    std::vector<real> v(size_t(heads * n), real(0));
    const auto& tv = t.table.data();
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t i = 0; i < n; ++i) v[size_t(h * n + i)] = tv[size_t(h * t.table_size + (*t.index)[size_t(i)])];
    auto tn = t.table.node();
    auto idx = t.index;
    auto tsize = t.table_size;
    return make_node({heads, t.nq, t.nk}, std::move(v), {t.table}, [tn, idx, heads, n, tsize](Node& node) {
        tn->ensure_grad();
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < n; ++i)
                tn->grad[size_t(h * tsize + (*idx)[size_t(i)])] += node.grad[size_t(h * n + i)];
    });
}

Tensor shift_mask(const Shape& spatial, int p, int s) {
    check_divisible(spatial, p);
    UTSR_REQUIRE(s >= 0 && s < p, "shift must satisfy 0 <= s < p");
    const int64_t d0 = spatial[0], d1 = spatial[1], d2 = spatial[2];
    // Per-axis region ids: [0, D-p) -> 0, [D-p, D-s) -> 1, [D-s, D) -> 2.
    auto region = [&](int64_t i, int64_t d) -> int { return i < d - p ? 0 : (i < d - s ? 1 : 2); };
    std::vector<int> ids(size_t(d0 * d1 * d2));
    for (int64_t i0 = 0; i0 < d0; ++i0)
        for (int64_t i1 = 0; i1 < d1; ++i1)
            for (int64_t i2 = 0; i2 < d2; ++i2)
                // the rolled grid at position i holds original voxel i+s
                ids[size_t((i0 * d1 + i1) * d2 + i2)] =
                    (region((i0 + s) % d0, d0) * 3 + region((i1 + s) % d1, d1)) * 3 +
                    region((i2 + s) % d2, d2);
    auto idx = window_index(spatial, p);
    const int64_t tokens = int64_t(p) * p * p;
    const int64_t num_win = int64_t(idx->size()) / tokens;
    std::vector<real> m(size_t(num_win * tokens * tokens), real(0));
    for (int64_t w = 0; w < num_win; ++w)
        for (int64_t q = 0; q < tokens; ++q) {
            int qi = ids[size_t((*idx)[size_t(w * tokens + q)])];
            for (int64_t k = 0; k < tokens; ++k) {
                int ki = ids[size_t((*idx)[size_t(w * tokens + k)])];
                if (qi != ki) m[size_t((w * tokens + q) * tokens + k)] = real(-100);
            }
        }
    return Tensor::from_data({num_win, tokens, tokens}, std::move(m));
}

}  // namespace utsr
