#include "utsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

namespace utsr {

namespace {

void require_same_dims(const LabelMask& a, const LabelMask& b) {
    UTSR_REQUIRE(a.dims == b.dims, "mask dims differ");
}

// boundary voxels of one label, as (x, y, z) triples
std::vector<std::array<int64_t, 3>> boundary(const LabelMask& m, int label) {
    const int64_t X = m.dims[0], Y = m.dims[1], Z = m.dims[2];
    auto at = [&](int64_t x, int64_t y, int64_t z) {
        return int(m.labels[size_t((z * Y + y) * X + x)]) == label;
    };
    std::vector<std::array<int64_t, 3>> out;
    for (int64_t z = 0; z < Z; ++z)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t x = 0; x < X; ++x) {
                if (!at(x, y, z)) continue;
                bool edge = x == 0 || x == X - 1 || y == 0 || y == Y - 1 || z == 0 || z == Z - 1;
                if (edge || !at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) ||
                    !at(x, y + 1, z) || !at(x, y, z - 1) || !at(x, y, z + 1))
                    out.push_back({x, y, z});
            }
    return out;
}

void directed_distances(const std::vector<std::array<int64_t, 3>>& from,
                        const std::vector<std::array<int64_t, 3>>& to,
                        const std::array<double, 3>& spacing, std::vector<double>& pool) {
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            double dx = double(p[0] - q[0]) * spacing[0];
            double dy = double(p[1] - q[1]) * spacing[1];
            double dz = double(p[2] - q[2]) * spacing[2];
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        pool.push_back(std::sqrt(best));
    }
}

double percentile(std::vector<double> v, double q) {
    UTSR_REQUIRE(!v.empty(), "percentile of empty set");
    std::sort(v.begin(), v.end());
    double h = q * double(v.size() - 1);
    size_t lo = size_t(h);
    if (lo + 1 >= v.size()) return v.back();
    double frac = h - double(lo);
    return v[lo] + (v[lo + 1] - v[lo]) * frac;
}

double erfc_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

}  // namespace

DiceResult dice(const LabelMask& a, const LabelMask& b, const std::vector<int>& labels) {
    require_same_dims(a, b);
    UTSR_REQUIRE(!labels.empty(), "dice: no labels requested");
    DiceResult r;
    for (int l : labels) {
        int64_t na = 0, nb = 0, inter = 0;
        for (size_t i = 0; i < a.labels.size(); ++i) {
            bool ia = int(a.labels[i]) == l, ib = int(b.labels[i]) == l;
            na += ia;
            nb += ib;
            inter += ia && ib;
        }
        double d = (na + nb == 0) ? 1.0 : 2.0 * double(inter) / double(na + nb);
        r.per_label[l] = d;
        r.mean += d;
    }
    r.mean /= double(labels.size());
    return r;
}

double hd95(const LabelMask& a, const LabelMask& b, int label, const std::array<double, 3>& spacing) {
    require_same_dims(a, b);
    auto ba = boundary(a, label), bb = boundary(b, label);
    UTSR_REQUIRE(!ba.empty(), "label " + std::to_string(label) + " absent in the first mask");
    UTSR_REQUIRE(!bb.empty(), "label " + std::to_string(label) + " absent in the second mask");
    std::vector<double> pool;
    pool.reserve(ba.size() + bb.size());
    directed_distances(ba, bb, spacing, pool);
    directed_distances(bb, ba, spacing, pool);
    return percentile(std::move(pool), 0.95);
}

std::vector<double> jacobian_determinants(const DisplacementField& field) {
    const int64_t X = field.dims[0], Y = field.dims[1], Z = field.dims[2];
    const int64_t S = field.voxels();
    auto u = [&](int c, int64_t x, int64_t y, int64_t z) {
        return double(field.values[size_t(c * S + (z * Y + y) * X + x)]);
    };
    // d(u_c)/d(axis) with central differences, one-sided at borders
    auto grad = [&](int c, int64_t x, int64_t y, int64_t z, int axis) {
        int64_t p[3] = {x, y, z};
        const int64_t n = field.dims[size_t(axis)];
        int64_t lo = std::max<int64_t>(0, p[axis] - 1), hi = std::min(n - 1, p[axis] + 1);
        int64_t a[3] = {x, y, z}, b[3] = {x, y, z};
        a[axis] = hi;
        b[axis] = lo;
        return (u(c, a[0], a[1], a[2]) - u(c, b[0], b[1], b[2])) / double(hi - lo);
    };
    std::vector<double> dets;
    dets.reserve(size_t(S));
    for (int64_t z = 0; z < Z; ++z)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t x = 0; x < X; ++x) {
                double j[3][3];
                for (int c = 0; c < 3; ++c)
                    for (int axis = 0; axis < 3; ++axis)
                        j[c][axis] = grad(c, x, y, z, axis) + (c == axis ? 1.0 : 0.0);
                dets.push_back(j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                               j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                               j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]));
            }
    return dets;
}

JacobianStats jacobian_stats(const DisplacementField& field) {
    const std::vector<double> dets = jacobian_determinants(field);
    int64_t folds = 0, pos = 0;
    double sum = 0, sumsq = 0;
    for (double det : dets) {
        if (det <= 0) {
            ++folds;
        } else {
            double lg = std::log(det);
            sum += lg;
            sumsq += lg * lg;
            ++pos;
        }
    }
    JacobianStats st;
    st.fold_fraction = double(folds) / double(dets.size());
    if (pos > 0) {
        double mean = sum / double(pos);
        st.sdlogj = std::sqrt(std::max(0.0, sumsq / double(pos) - mean * mean));
    }
    return st;
}

LandmarkSet warp_landmarks(const LandmarkSet& moving, const DisplacementField& field) {
    const int64_t X = field.dims[0], Y = field.dims[1], Z = field.dims[2];
    const int64_t S = field.voxels();
    auto u = [&](int c, int64_t x, int64_t y, int64_t z) {
        return double(field.values[size_t(c * S + (z * Y + y) * X + x)]);
    };
    LandmarkSet out;
    out.names = moving.names;
    for (const auto& pmm : moving.positions_mm) {
        std::array<double, 3> p = mm_to_voxel(pmm, field.spacing);
        double cl[3];
        int64_t i0[3];
        double f[3];
        const int64_t n[3] = {X, Y, Z};
        for (int a = 0; a < 3; ++a) {
            cl[a] = std::clamp(p[size_t(a)], 0.0, double(n[a] - 1));
            i0[a] = std::min(n[a] - 2, std::max<int64_t>(0, int64_t(std::floor(cl[a]))));
            f[a] = cl[a] - double(i0[a]);
        }
        std::array<double, 3> disp{};
        for (int c = 0; c < 3; ++c) {
            double v = 0;
            for (int dz = 0; dz < 2; ++dz)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) *
                                   (dz ? f[2] : 1 - f[2]);
                        v += w * u(c, i0[0] + dx, i0[1] + dy, i0[2] + dz);
                    }
            disp[size_t(c)] = v;
        }
        std::array<double, 3> warped{p[0] + disp[0], p[1] + disp[1], p[2] + disp[2]};
        out.positions_mm.push_back(voxel_to_mm(warped, field.spacing));
    }
    return out;
}

TreResult tre(const LandmarkSet& fixed_lm, const LandmarkSet& warped_lm) {
    std::set<std::string> fs(fixed_lm.names.begin(), fixed_lm.names.end());
    std::set<std::string> ws(warped_lm.names.begin(), warped_lm.names.end());
    if (fs != ws) {
        std::string diff;
        for (const auto& n : fs)
            if (!ws.count(n)) diff += " -" + n;
        for (const auto& n : ws)
            if (!fs.count(n)) diff += " +" + n;
        fail("landmark name sets differ:" + diff);
    }
    std::map<std::string, std::array<double, 3>> wpos;
    for (size_t i = 0; i < warped_lm.names.size(); ++i) wpos[warped_lm.names[i]] = warped_lm.positions_mm[i];
    TreResult r;
    for (size_t i = 0; i < fixed_lm.names.size(); ++i) {
        const auto& a = fixed_lm.positions_mm[i];
        const auto& b = wpos[fixed_lm.names[i]];
        double d = std::sqrt(std::pow(a[0] - b[0], 2) + std::pow(a[1] - b[1], 2) +
                             std::pow(a[2] - b[2], 2));
        r.per_landmark.emplace_back(fixed_lm.names[i], d);
        r.mean += d;
    }
    const double n = double(r.per_landmark.size());
    r.mean /= n;
    double var = 0;
    for (const auto& [name, d] : r.per_landmark) var += (d - r.mean) * (d - r.mean);
    r.sd = std::sqrt(var / n);
    return r;
}

RankSumResult wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y) {
    UTSR_REQUIRE(!x.empty() && !y.empty(), "wilcoxon_rank_sum: empty sample");
    const size_t n = x.size(), m = y.size(), N = n + m;
    std::vector<double> all(x);
    all.insert(all.end(), y.begin(), y.end());
    std::vector<size_t> order(N);
    for (size_t i = 0; i < N; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return all[a] < all[b]; });
    std::vector<double> rank(N);
    double tie_term = 0;
    for (size_t i = 0; i < N;) {
        size_t j = i;
        while (j < N && all[order[j]] == all[order[i]]) ++j;
        double mid = (double(i + 1) + double(j)) / 2.0;  // midrank of the tie group
        for (size_t k = i; k < j; ++k) rank[order[k]] = mid;
        double t = double(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    double w = 0;
    for (size_t i = 0; i < n; ++i) w += rank[i];
    const double mu = double(n) * double(N + 1) / 2.0;
    const double dev = w - mu;

    RankSumResult r;
    double var = double(n) * double(m) / 12.0 *
                 (double(N + 1) - tie_term / (double(N) * double(N - 1)));
    if (var > 0) {
        double cc = dev > 0 ? 0.5 : (dev < 0 ? -0.5 : 0.0);
        r.statistic = (dev - cc) / std::sqrt(var);
    }

    if (N <= 10) {
        // exact: all C(N, n) assignments of ranks to the first sample
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        int64_t total = 0, extreme = 0;
        const double thresh = std::abs(dev) - 1e-12;
        while (true) {
            double ws = 0;
            for (size_t i : idx) ws += rank[i];
            ++total;
            if (std::abs(ws - mu) >= thresh) ++extreme;
            // next combination
            size_t k = n;
            while (k > 0 && idx[k - 1] == N - n + k - 1) --k;
            if (k == 0) break;
            ++idx[k - 1];
            for (size_t i = k; i < n; ++i) idx[i] = idx[i - 1] + 1;
        }
        r.p_value = double(extreme) / double(total);
    } else {
        r.p_value = var > 0 ? erfc_p(r.statistic) : 1.0;
    }
    return r;
}

std::string eval_report_json(const DiceResult* dsc, const std::map<int, double>* hd,
                             const JacobianStats* jac, const TreResult* t) {
    nlohmann::json j;
    if (dsc) {
        nlohmann::json d;
        for (const auto& [l, v] : dsc->per_label) d[std::to_string(l)] = v;
        j["dsc"] = d;
        j["dsc_mean"] = dsc->mean;
    }
    if (hd) {
        nlohmann::json h;
        for (const auto& [l, v] : *hd) h[std::to_string(l)] = v;
        j["hd95"] = h;
    }
    if (jac) {
        j["fold_pct"] = 100.0 * jac->fold_fraction;
        j["sdlogj"] = jac->sdlogj;
    }
    if (t) {
        j["tre_mean"] = t->mean;
        j["tre_sd"] = t->sd;
    }
    return j.dump(2);
}

}  // namespace utsr
