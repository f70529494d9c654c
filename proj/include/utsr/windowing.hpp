#pragma once

#include <cmath>
#include <memory>

#include "utsr/tensor.hpp"

namespace utsr {

// Cubic query windows of extent p; overlapping key/value windows of extent
// po = round((1+eps)*p), centered by zero-padding (extra voxel on the high
// side when po-p is odd).
struct WindowSpec {
    int p = 4;
    double epsilon = 0.5;

    int po() const { return int(std::lround((1.0 + epsilon) * p)); }
    int pad_lo() const { return (po() - p) / 2; }
    int pad_hi() const { return po() - p - pad_lo(); }
};

// Gather index maps (entries are linear spatial indices, -1 reads zero).
// Window order is raster order over the window grid; token order is raster
// order within the window, all on [D0, D1, D2] (slow..fast) axes.
std::shared_ptr<std::vector<int64_t>> window_index(const Shape& spatial, int p);
std::shared_ptr<std::vector<int64_t>> overlap_index(const Shape& spatial, const WindowSpec& spec);

// x: [C, D0, D1, D2] -> [numWin, p^3, C]; reverse is the exact inverse.
Tensor window_partition(const Tensor& x, int p);
Tensor window_reverse(const Tensor& win, int p, const Shape& spatial);
// -> [numWin, po^3, C] with the zero-padded rim.
Tensor overlapping_partition(const Tensor& x, const WindowSpec& spec);

// Toroidal roll: cyclic_shift(x, s)[i] = x[(i+s) mod n] per axis (the
// forward shifted pass); undo with cyclic_shift(x, -s).
Tensor cyclic_shift(const Tensor& x, int s0, int s1, int s2);

// Learnable relative-position bias table plus its precomputed index map.
struct RelPosBiasTable {
    Tensor table;  // [heads, table_size]
    std::shared_ptr<std::vector<int64_t>> index;  // nq*nk entries into table_size
    int64_t nq = 0, nk = 0;
    int64_t table_size = 0;
};

// Non-overlapping case: (2p-1)^3 table, nq = nk = p^3.
RelPosBiasTable make_bias_wmsa(int p, int heads);
// Overlapping case: (p+po-1)^3 table, nq = p^3, nk = po^3.
RelPosBiasTable make_bias_oab(const WindowSpec& spec, int heads);
// Differentiable gather: [heads, nq, nk].
Tensor build_bias(const RelPosBiasTable& t);

// Seam mask for shifted-window attention: [numWin, p^3, p^3], entries 0 for
// same-region pairs and -100 across regions. Constant (no gradient).
Tensor shift_mask(const Shape& spatial, int p, int s);

}  // namespace utsr
