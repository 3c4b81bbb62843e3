#include "softmodnet/tensor.hpp"

#include <sstream>

namespace softmodnet {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream ss;
  ss << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) ss << ',';
    ss << s[i];
  }
  ss << ']';
  return ss.str();
}

Broadcast2 Broadcast2::make(const Shape& a, const Shape& b) {
  Broadcast2 bc;
  const bool a_scalar = numel(a) == 1;
  const bool b_scalar = numel(b) == 1;
  // Scalars broadcast everywhere; shortcut so a [1] vector can scale a map.
  if (a_scalar && !b_scalar) {
    bc.out = b;
    bc.stride_a.assign(b.size(), 0);
    bc.stride_b.resize(b.size());
    int64_t st = 1;
    for (int d = static_cast<int>(b.size()) - 1; d >= 0; --d) {
      bc.stride_b[d] = st;
      st *= b[d];
    }
    bc.b_is_out = true;
    return bc;
  }
  if (b_scalar) {
    bc.out = a;
    bc.stride_b.assign(a.size(), 0);
    bc.stride_a.resize(a.size());
    int64_t st = 1;
    for (int d = static_cast<int>(a.size()) - 1; d >= 0; --d) {
      bc.stride_a[d] = st;
      st *= a[d];
    }
    bc.a_is_out = true;
    if (a_scalar) bc.b_is_out = true;
    return bc;
  }

  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  bc.out.resize(nd);
  Shape pa(nd, 1), pb(nd, 1);
  for (size_t i = 0; i < a.size(); ++i) pa[nd - a.size() + i] = a[i];
  for (size_t i = 0; i < b.size(); ++i) pb[nd - b.size() + i] = b[i];
  for (int d = 0; d < nd; ++d) {
    if (pa[d] == pb[d]) {
      bc.out[d] = pa[d];
    } else if (pa[d] == 1) {
      bc.out[d] = pb[d];
    } else if (pb[d] == 1) {
      bc.out[d] = pa[d];
    } else {
      throw ShapeError("broadcast mismatch: " + shape_str(a) + " vs " +
                       shape_str(b));
    }
  }
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  int64_t sa = 1, sb = 1;
  for (int d = nd - 1; d >= 0; --d) {
    if (pa[d] != 1) {
      bc.stride_a[d] = sa;
      sa *= pa[d];
    }
    if (pb[d] != 1) {
      bc.stride_b[d] = sb;
      sb *= pb[d];
    }
  }
  bc.a_is_out = (pa == bc.out);
  bc.b_is_out = (pb == bc.out);
  return bc;
}

}  // namespace softmodnet
