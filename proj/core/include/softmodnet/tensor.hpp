#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "softmodnet/util.hpp"

namespace softmodnet {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Pairwise broadcast plan for elementwise ops. Shapes align right-justified;
// extents must match or be 1 (missing leading dims count as 1). A one-element
// operand broadcasts as a scalar regardless of its shape. Strides of 0 mark
// broadcast dims.
struct Broadcast2 {
  Shape out;
  std::vector<int64_t> stride_a;  // per out dim, in elements
  std::vector<int64_t> stride_b;
  bool a_is_out = false;  // a's layout equals the output layout
  bool b_is_out = false;

  static Broadcast2 make(const Shape& a, const Shape& b);
};

// Applies fn(out_index, a_index, b_index) over the full output extent of a
// broadcast plan. The innermost dimension runs as a contiguous block so that
// simple arithmetic bodies vectorize.
template <typename F>
void broadcast_for_each(const Broadcast2& bc, F&& fn) {
  const int64_t total = numel(bc.out);
  if (total == 0) return;
  if (bc.a_is_out && bc.b_is_out) {
    for (int64_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const int nd = static_cast<int>(bc.out.size());
  if (nd == 0) {
    fn(0, 0, 0);
    return;
  }
  const int64_t inner = bc.out[nd - 1];
  const int64_t sa = bc.stride_a[nd - 1];
  const int64_t sb = bc.stride_b[nd - 1];
  std::vector<int> ix(nd, 0);
  int64_t oa = 0, ob = 0, oo = 0;
  const int64_t outer = total / inner;
  for (int64_t blk = 0; blk < outer; ++blk) {
    for (int64_t i = 0; i < inner; ++i) fn(oo + i, oa + i * sa, ob + i * sb);
    oo += inner;
    // odometer over the outer dims
    for (int d = nd - 2; d >= 0; --d) {
      ++ix[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (ix[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      ix[d] = 0;
    }
  }
}

}  // namespace softmodnet
