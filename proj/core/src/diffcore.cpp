#include "softmodnet/diffcore.hpp"

#include <algorithm>
#include <cmath>

namespace softmodnet {

// ---------------------------------------------------------------------------
// Tensor handle accessors

template <typename T>
const Shape& Tensor<T>::shape() const {
  return g->shape(id);
}
template <typename T>
int64_t Tensor<T>::size() const {
  return numel(g->shape(id));
}
template <typename T>
const std::vector<T>& Tensor<T>::value() const {
  return g->value(id);
}
template <typename T>
T Tensor<T>::scalar_value() const {
  const auto& v = g->value(id);
  if (v.size() != 1) throw ContractError("scalar_value on non-scalar tensor");
  return v[0];
}

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
int ParamStore<T>::add(std::string name, Shape shape, std::vector<T> value,
                       bool is_arch) {
  if (numel(shape) != static_cast<int64_t>(value.size()))
    throw ShapeError("param " + name + ": value size does not match shape");
  if (by_name_.count(name)) throw ContractError("duplicate param: " + name);
  int id = static_cast<int>(entries_.size());
  by_name_[name] = id;
  entries_.push_back(ParamEntry<T>{std::move(name), std::move(shape), is_arch,
                                   std::move(value)});
  return id;
}

template <typename T>
int ParamStore<T>::add_zeros(std::string name, Shape shape, bool is_arch) {
  std::vector<T> v(numel(shape), T(0));
  return add(std::move(name), std::move(shape), std::move(v), is_arch);
}

template <typename T>
int ParamStore<T>::add_uniform(std::string name, Shape shape, Rng& rng,
                               double bound, bool is_arch) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return add(std::move(name), std::move(shape), std::move(v), is_arch);
}

template <typename T>
int ParamStore<T>::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

template <typename T>
std::vector<int> ParamStore<T>::ids(bool is_arch) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (entries_[i].is_arch == is_arch) out.push_back(i);
  return out;
}

template <typename T>
std::vector<int> ParamStore<T>::all_ids() const {
  std::vector<int> out(entries_.size());
  for (size_t i = 0; i < entries_.size(); ++i) out[i] = static_cast<int>(i);
  return out;
}

template <typename T>
int64_t ParamStore<T>::total_elems() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += numel(e.shape);
  return n;
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Tensor<T> Graph<T>::constant(Shape shape, std::vector<T> value) {
  if (numel(shape) != static_cast<int64_t>(value.size()))
    throw ShapeError("constant: value size does not match shape " +
                     shape_str(shape));
  int id = add_node(std::move(shape), std::move(value), {}, nullptr);
  return Tensor<T>{this, id};
}

template <typename T>
Tensor<T> Graph<T>::scalar(T v) {
  return constant({1}, {v});
}

template <typename T>
Tensor<T> Graph<T>::zeros(Shape shape) {
  std::vector<T> v(numel(shape), T(0));
  return constant(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Graph<T>::variable(Shape shape, std::vector<T> value) {
  if (numel(shape) != static_cast<int64_t>(value.size()))
    throw ShapeError("variable: value size does not match shape");
  int id = add_node(std::move(shape), std::move(value), {}, nullptr);
  nodes_[id].needs_grad = true;
  return Tensor<T>{this, id};
}

template <typename T>
Tensor<T> Graph<T>::param(int pid) {
  if (store_ == nullptr) throw ContractError("graph has no param store");
  auto it = param_nodes_.find(pid);
  if (it != param_nodes_.end()) return Tensor<T>{this, it->second};
  const auto& e = store_->entry(pid);
  int id = add_node(e.shape, e.value, {}, nullptr);
  nodes_[id].needs_grad = true;
  param_nodes_[pid] = id;
  return Tensor<T>{this, id};
}

template <typename T>
int Graph<T>::add_node(Shape shape, std::vector<T> value,
                       const std::vector<int>& inputs,
                       std::function<void(Graph&)> back) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (int in : inputs) {
    if (nodes_[in].needs_grad) {
      n.needs_grad = true;
      break;
    }
  }
  n.back = n.needs_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (loss.g != this) throw ContractError("backward: loss from another graph");
  if (backward_done_) throw ContractError("backward already ran on this tape");
  if (numel(nodes_[loss.id].shape) != 1)
    throw ContractError("backward: loss must be scalar");
  backward_done_ = true;
  for (auto& n : nodes_) n.grad.assign(n.value.size(), T(0));
  nodes_[loss.id].grad[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.back) n.back(*this);
  }
}

template <typename T>
const std::vector<T>& Graph<T>::grad(int id) const {
  if (!backward_done_) throw ContractError("grad requested before backward");
  return nodes_[id].grad;
}

template <typename T>
std::vector<T> Graph<T>::param_grad(int pid) const {
  if (!backward_done_) throw ContractError("grad requested before backward");
  auto it = param_nodes_.find(pid);
  if (it == param_nodes_.end())
    return std::vector<T>(numel(store_->entry(pid).shape), T(0));
  return nodes_[it->second].grad;
}

// ---------------------------------------------------------------------------
// Binary elementwise ops

namespace {
enum class BinKind { Add, Sub, Mul, Div, Min, Max };
}

template <typename T>
static Tensor<T> make_binary(BinKind kind, Tensor<T> a, Tensor<T> b) {
  if (a.g != b.g) throw ContractError("binary op: operands on distinct tapes");
  Graph<T>& g = *a.g;
  Broadcast2 bc = Broadcast2::make(g.shape(a.id), g.shape(b.id));
  const auto& va = g.value(a.id);
  const auto& vb = g.value(b.id);
  std::vector<T> out(numel(bc.out));
  auto fwd = [&](auto&& f) {
    broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
      out[io] = f(va[ia], vb[ib]);
    });
  };
  switch (kind) {
    case BinKind::Add: fwd([](T x, T y) { return x + y; }); break;
    case BinKind::Sub: fwd([](T x, T y) { return x - y; }); break;
    case BinKind::Mul: fwd([](T x, T y) { return x * y; }); break;
    case BinKind::Div: fwd([](T x, T y) { return x / y; }); break;
    case BinKind::Min: fwd([](T x, T y) { return y < x ? y : x; }); break;
    case BinKind::Max: fwd([](T x, T y) { return y > x ? y : x; }); break;
  }
  const int aid = a.id, bid = b.id;
  // the output node id is nodes_.size() at creation time
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(bc.out, std::move(out), {aid, bid}, [kind, aid, bid, oid,
                                                  bc](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    const auto& va2 = gg.value(aid);
    const auto& vb2 = gg.value(bid);
    auto& ga = gg.grad_ref(aid);
    auto& gb = gg.grad_ref(bid);
    switch (kind) {
      case BinKind::Add:
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          ga[ia] += go[io];
          gb[ib] += go[io];
        });
        break;
      case BinKind::Sub:
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          ga[ia] += go[io];
          gb[ib] -= go[io];
        });
        break;
      case BinKind::Mul:
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          ga[ia] += go[io] * vb2[ib];
          gb[ib] += go[io] * va2[ia];
        });
        break;
      case BinKind::Div:
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          ga[ia] += go[io] / vb2[ib];
          gb[ib] -= go[io] * va2[ia] / (vb2[ib] * vb2[ib]);
        });
        break;
      case BinKind::Min:
        // ties route to the first argument
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          if (va2[ia] <= vb2[ib]) ga[ia] += go[io];
          else gb[ib] += go[io];
        });
        break;
      case BinKind::Max:
        broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
          if (va2[ia] >= vb2[ib]) ga[ia] += go[io];
          else gb[ib] += go[io];
        });
        break;
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T> Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Add, a, b);
}
template <typename T> Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Sub, a, b);
}
template <typename T> Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Mul, a, b);
}
template <typename T> Tensor<T> vdiv(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Div, a, b);
}
template <typename T> Tensor<T> emin(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Min, a, b);
}
template <typename T> Tensor<T> emax(Tensor<T> a, Tensor<T> b) {
  return make_binary(BinKind::Max, a, b);
}

// ---------------------------------------------------------------------------
// Unary elementwise ops

namespace {
enum class UnKind { Affine, Relu, Sigmoid, Tanh, Log, Sqrt, Exp };
}

template <typename T>
static T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
static Tensor<T> make_unary(UnKind kind, Tensor<T> x, T mc = T(0), T ac = T(0)) {
  Graph<T>& g = *x.g;
  const auto& vx = g.value(x.id);
  std::vector<T> out(vx.size());
  switch (kind) {
    case UnKind::Affine:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = mc * vx[i] + ac;
      break;
    case UnKind::Relu:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = vx[i] > T(0) ? vx[i] : T(0);
      break;
    case UnKind::Sigmoid:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = stable_sigmoid(vx[i]);
      break;
    case UnKind::Tanh:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = std::tanh(vx[i]);
      break;
    case UnKind::Log:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = std::log(vx[i]);
      break;
    case UnKind::Sqrt:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = std::sqrt(vx[i]);
      break;
    case UnKind::Exp:
      for (size_t i = 0; i < vx.size(); ++i) out[i] = std::exp(vx[i]);
      break;
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(g.shape(x.id), std::move(out), {xid},
             [kind, xid, oid, mc](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               const auto& vo = gg.value(oid);
               const auto& vx2 = gg.value(xid);
               auto& gx = gg.grad_ref(xid);
               const size_t n = vx2.size();
               switch (kind) {
                 case UnKind::Affine:
                   for (size_t i = 0; i < n; ++i) gx[i] += go[i] * mc;
                   break;
                 case UnKind::Relu:
                   for (size_t i = 0; i < n; ++i)
                     if (vx2[i] > T(0)) gx[i] += go[i];
                   break;
                 case UnKind::Sigmoid:
                   for (size_t i = 0; i < n; ++i)
                     gx[i] += go[i] * vo[i] * (T(1) - vo[i]);
                   break;
                 case UnKind::Tanh:
                   for (size_t i = 0; i < n; ++i)
                     gx[i] += go[i] * (T(1) - vo[i] * vo[i]);
                   break;
                 case UnKind::Log:
                   for (size_t i = 0; i < n; ++i) gx[i] += go[i] / vx2[i];
                   break;
                 case UnKind::Sqrt:
                   for (size_t i = 0; i < n; ++i)
                     gx[i] += go[i] * T(0.5) / vo[i];
                   break;
                 case UnKind::Exp:
                   for (size_t i = 0; i < n; ++i) gx[i] += go[i] * vo[i];
                   break;
               }
             });
  return Tensor<T>{&g, oid};
}

template <typename T> Tensor<T> affine(Tensor<T> x, T mul_c, T add_c) {
  return make_unary(UnKind::Affine, x, mul_c, add_c);
}
template <typename T> Tensor<T> relu(Tensor<T> x) {
  return make_unary(UnKind::Relu, x);
}
template <typename T> Tensor<T> sigmoid(Tensor<T> x) {
  return make_unary(UnKind::Sigmoid, x);
}
template <typename T> Tensor<T> tanh(Tensor<T> x) {
  return make_unary(UnKind::Tanh, x);
}
template <typename T> Tensor<T> log(Tensor<T> x) {
  return make_unary(UnKind::Log, x);
}
template <typename T> Tensor<T> sqrt(Tensor<T> x) {
  return make_unary(UnKind::Sqrt, x);
}
template <typename T> Tensor<T> exp(Tensor<T> x) {
  return make_unary(UnKind::Exp, x);
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
  Graph<T>& g = *x.g;
  if (numel(shape) != numel(g.shape(x.id)))
    throw ShapeError("reshape: element count mismatch " +
                     shape_str(g.shape(x.id)) + " -> " + shape_str(shape));
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(std::move(shape), g.value(x.id), {xid}, [xid, oid](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    auto& gx = gg.grad_ref(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> slice(Tensor<T> x, int64_t offset, int64_t len) {
  Graph<T>& g = *x.g;
  const auto& vx = g.value(x.id);
  if (offset < 0 || len < 0 ||
      offset + len > static_cast<int64_t>(vx.size()))
    throw ShapeError("slice out of range");
  std::vector<T> out(vx.begin() + offset, vx.begin() + offset + len);
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({static_cast<int>(len)}, std::move(out), {xid},
             [xid, oid, offset, len](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               auto& gx = gg.grad_ref(xid);
               for (int64_t i = 0; i < len; ++i) gx[offset + i] += go[i];
             });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Graph<T>& g = *parts[0].g;
  std::vector<T> out;
  std::vector<int> ids;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    if (p.g != &g) throw ContractError("concat: operands on distinct tapes");
    const auto& v = g.value(p.id);
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(p.id);
    sizes.push_back(static_cast<int64_t>(v.size()));
  }
  const int oid = static_cast<int>(g.num_nodes());
  Shape oshape{static_cast<int>(out.size())};
  g.add_node(std::move(oshape), std::move(out), ids,
             [ids, sizes, oid](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               int64_t off = 0;
               for (size_t k = 0; k < ids.size(); ++k) {
                 auto& gx = gg.grad_ref(ids[k]);
                 for (int64_t i = 0; i < sizes[k]; ++i) gx[i] += go[off + i];
                 off += sizes[k];
               }
             });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  Graph<T>& g = *rows[0].g;
  const int64_t d = numel(g.shape(rows[0].id));
  std::vector<T> out;
  out.reserve(rows.size() * d);
  std::vector<int> ids;
  for (const auto& r : rows) {
    if (r.g != &g) throw ContractError("stack_rows: distinct tapes");
    if (numel(g.shape(r.id)) != d)
      throw ShapeError("stack_rows: ragged row sizes");
    const auto& v = g.value(r.id);
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(r.id);
  }
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({static_cast<int>(rows.size()), static_cast<int>(d)},
             std::move(out), ids, [ids, d, oid](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               for (size_t k = 0; k < ids.size(); ++k) {
                 auto& gx = gg.grad_ref(ids[k]);
                 for (int64_t i = 0; i < d; ++i) gx[i] += go[k * d + i];
               }
             });
  return Tensor<T>{&g, oid};
}

// ---------------------------------------------------------------------------
// Reductions and linear maps

template <typename T>
Tensor<T> sum_all(Tensor<T> x) {
  Graph<T>& g = *x.g;
  const auto& vx = g.value(x.id);
  T s = T(0);
  for (T v : vx) s += v;
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({1}, {s}, {xid}, [xid, oid](Graph<T>& gg) {
    const T go = gg.grad_ref(oid)[0];
    auto& gx = gg.grad_ref(xid);
    for (auto& v : gx) v += go;
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> sum_spatial(Tensor<T> x) {
  Graph<T>& g = *x.g;
  const Shape& s = g.shape(x.id);
  if (s.size() != 3) throw ShapeError("sum_spatial expects [H,W,C]");
  const int64_t pixels = int64_t(s[0]) * s[1];
  const int c = s[2];
  const auto& vx = g.value(x.id);
  std::vector<T> out(c, T(0));
  for (int64_t p = 0; p < pixels; ++p)
    for (int j = 0; j < c; ++j) out[j] += vx[p * c + j];
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({c}, std::move(out), {xid}, [xid, oid, pixels, c](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    auto& gx = gg.grad_ref(xid);
    for (int64_t p = 0; p < pixels; ++p)
      for (int j = 0; j < c; ++j) gx[p * c + j] += go[j];
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
static Tensor<T> linear_impl(Tensor<T> W, Tensor<T> x, Tensor<T>* b) {
  Graph<T>& g = *W.g;
  const Shape& ws = g.shape(W.id);
  const Shape& xs = g.shape(x.id);
  if (ws.size() != 2 || xs.size() != 1 || ws[1] != xs[0])
    throw ShapeError("linear: W " + shape_str(ws) + " x " + shape_str(xs));
  if (b != nullptr) {
    const Shape& bs = g.shape(b->id);
    if (numel(bs) != ws[0]) throw ShapeError("linear: bias extent mismatch");
  }
  const int m = ws[0], n = ws[1];
  const auto& vw = g.value(W.id);
  const auto& vx = g.value(x.id);
  std::vector<T> out(m, T(0));
  for (int i = 0; i < m; ++i) {
    T acc = T(0);
    const T* row = vw.data() + int64_t(i) * n;
    for (int j = 0; j < n; ++j) acc += row[j] * vx[j];
    out[i] = acc;
  }
  if (b != nullptr) {
    const auto& vb = g.value(b->id);
    for (int i = 0; i < m; ++i) out[i] += vb[i];
  }
  const int wid = W.id, xid = x.id, bid = b ? b->id : -1;
  const int oid = static_cast<int>(g.num_nodes());
  std::vector<int> ins{wid, xid};
  if (bid >= 0) ins.push_back(bid);
  g.add_node({m}, std::move(out), ins, [wid, xid, bid, oid, m, n](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    const auto& vw2 = gg.value(wid);
    const auto& vx2 = gg.value(xid);
    auto& gw = gg.grad_ref(wid);
    auto& gx = gg.grad_ref(xid);
    for (int i = 0; i < m; ++i) {
      const T gi = go[i];
      T* gwrow = gw.data() + int64_t(i) * n;
      const T* wrow = vw2.data() + int64_t(i) * n;
      for (int j = 0; j < n; ++j) {
        gwrow[j] += gi * vx2[j];
        gx[j] += gi * wrow[j];
      }
    }
    if (bid >= 0) {
      auto& gb = gg.grad_ref(bid);
      for (int i = 0; i < m; ++i) gb[i] += go[i];
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T> Tensor<T> linear(Tensor<T> W, Tensor<T> x) {
  return linear_impl<T>(W, x, nullptr);
}
template <typename T> Tensor<T> linear(Tensor<T> W, Tensor<T> x, Tensor<T> b) {
  return linear_impl<T>(W, x, &b);
}

template <typename T>
Tensor<T> rowsum_weighted(Tensor<T> M, Tensor<T> w) {
  Graph<T>& g = *M.g;
  const Shape& ms = g.shape(M.id);
  const Shape& wsh = g.shape(w.id);
  if (ms.size() != 2 || numel(wsh) != ms[0])
    throw ShapeError("rowsum_weighted: M " + shape_str(ms) + " w " +
                     shape_str(wsh));
  const int s = ms[0], d = ms[1];
  const auto& vm = g.value(M.id);
  const auto& vw = g.value(w.id);
  std::vector<T> out(d, T(0));
  for (int r = 0; r < s; ++r) {
    const T wr = vw[r];
    const T* row = vm.data() + int64_t(r) * d;
    for (int j = 0; j < d; ++j) out[j] += wr * row[j];
  }
  const int mid = M.id, wid = w.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({d}, std::move(out), {mid, wid}, [mid, wid, oid, s, d](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    const auto& vm2 = gg.value(mid);
    const auto& vw2 = gg.value(wid);
    auto& gm = gg.grad_ref(mid);
    auto& gw = gg.grad_ref(wid);
    for (int r = 0; r < s; ++r) {
      const T wr = vw2[r];
      T acc = T(0);
      T* gmr = gm.data() + int64_t(r) * d;
      const T* vmr = vm2.data() + int64_t(r) * d;
      for (int j = 0; j < d; ++j) {
        gmr[j] += go[j] * wr;
        acc += go[j] * vmr[j];
      }
      gw[r] += acc;
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
static Tensor<T> conv1x1_impl(Tensor<T> x, Tensor<T> K, Tensor<T>* b) {
  Graph<T>& g = *x.g;
  const Shape& xs = g.shape(x.id);
  const Shape& ks = g.shape(K.id);
  if (xs.size() != 3 || ks.size() != 2 || ks[0] != xs[2])
    throw ShapeError("conv1x1: x " + shape_str(xs) + " K " + shape_str(ks));
  const int64_t pixels = int64_t(xs[0]) * xs[1];
  const int ci = ks[0], co = ks[1];
  if (b != nullptr && numel(g.shape(b->id)) != co)
    throw ShapeError("conv1x1: bias extent mismatch");
  const auto& vx = g.value(x.id);
  const auto& vk = g.value(K.id);
  std::vector<T> out(pixels * co, T(0));
  for (int64_t p = 0; p < pixels; ++p) {
    const T* xp = vx.data() + p * ci;
    T* op = out.data() + p * co;
    for (int i = 0; i < ci; ++i) {
      const T xv = xp[i];
      const T* krow = vk.data() + int64_t(i) * co;
      for (int j = 0; j < co; ++j) op[j] += xv * krow[j];
    }
  }
  if (b != nullptr) {
    const auto& vb = g.value(b->id);
    for (int64_t p = 0; p < pixels; ++p)
      for (int j = 0; j < co; ++j) out[p * co + j] += vb[j];
  }
  const int xid = x.id, kid = K.id, bid = b ? b->id : -1;
  const int oid = static_cast<int>(g.num_nodes());
  std::vector<int> ins{xid, kid};
  if (bid >= 0) ins.push_back(bid);
  g.add_node({xs[0], xs[1], co}, std::move(out), ins,
             [xid, kid, bid, oid, pixels, ci, co](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               const auto& vx2 = gg.value(xid);
               const auto& vk2 = gg.value(kid);
               auto& gx = gg.grad_ref(xid);
               auto& gk = gg.grad_ref(kid);
               for (int64_t p = 0; p < pixels; ++p) {
                 const T* gop = go.data() + p * co;
                 const T* xp = vx2.data() + p * ci;
                 T* gxp = gx.data() + p * ci;
                 for (int i = 0; i < ci; ++i) {
                   const T* krow = vk2.data() + int64_t(i) * co;
                   T* gkrow = gk.data() + int64_t(i) * co;
                   T acc = T(0);
                   for (int j = 0; j < co; ++j) {
                     acc += gop[j] * krow[j];
                     gkrow[j] += gop[j] * xp[i];
                   }
                   gxp[i] += acc;
                 }
               }
               if (bid >= 0) {
                 auto& gb = gg.grad_ref(bid);
                 for (int64_t p = 0; p < pixels; ++p)
                   for (int j = 0; j < co; ++j) gb[j] += go[p * co + j];
               }
             });
  return Tensor<T>{&g, oid};
}

template <typename T> Tensor<T> conv1x1(Tensor<T> x, Tensor<T> K) {
  return conv1x1_impl<T>(x, K, nullptr);
}
template <typename T> Tensor<T> conv1x1(Tensor<T> x, Tensor<T> K, Tensor<T> b) {
  return conv1x1_impl<T>(x, K, &b);
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {
struct AxisSplit {
  int64_t outer, n, inner;
};
inline AxisSplit axis_split(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis out of range for shape " + shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (int d = 0; d < axis; ++d) sp.outer *= s[d];
  for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) sp.inner *= s[d];
  return sp;
}
}  // namespace

template <typename T>
Tensor<T> softmax(Tensor<T> x, int axis) {
  Graph<T>& g = *x.g;
  const Shape& s = g.shape(x.id);
  const AxisSplit sp = axis_split(s, axis);
  const auto& vx = g.value(x.id);
  std::vector<T> out(vx.size());
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      const int64_t base = o * sp.n * sp.inner + in;
      T mx = vx[base];
      for (int64_t j = 1; j < sp.n; ++j)
        mx = std::max(mx, vx[base + j * sp.inner]);
      T denom = T(0);
      for (int64_t j = 0; j < sp.n; ++j) {
        T e = std::exp(vx[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        denom += e;
      }
      for (int64_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= denom;
    }
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(s, std::move(out), {xid}, [xid, oid, sp](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    const auto& vo = gg.value(oid);
    auto& gx = gg.grad_ref(xid);
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t in = 0; in < sp.inner; ++in) {
        const int64_t base = o * sp.n * sp.inner + in;
        T dot = T(0);
        for (int64_t j = 0; j < sp.n; ++j)
          dot += go[base + j * sp.inner] * vo[base + j * sp.inner];
        for (int64_t j = 0; j < sp.n; ++j) {
          const int64_t k = base + j * sp.inner;
          gx[k] += vo[k] * (go[k] - dot);
        }
      }
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> log_softmax(Tensor<T> x, int axis) {
  Graph<T>& g = *x.g;
  const Shape& s = g.shape(x.id);
  const AxisSplit sp = axis_split(s, axis);
  const auto& vx = g.value(x.id);
  std::vector<T> out(vx.size());
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      const int64_t base = o * sp.n * sp.inner + in;
      T mx = vx[base];
      for (int64_t j = 1; j < sp.n; ++j)
        mx = std::max(mx, vx[base + j * sp.inner]);
      T denom = T(0);
      for (int64_t j = 0; j < sp.n; ++j)
        denom += std::exp(vx[base + j * sp.inner] - mx);
      const T lse = mx + std::log(denom);
      for (int64_t j = 0; j < sp.n; ++j)
        out[base + j * sp.inner] = vx[base + j * sp.inner] - lse;
    }
  }
  const int xid = x.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(s, std::move(out), {xid}, [xid, oid, sp](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    const auto& vo = gg.value(oid);
    auto& gx = gg.grad_ref(xid);
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t in = 0; in < sp.inner; ++in) {
        const int64_t base = o * sp.n * sp.inner + in;
        T gsum = T(0);
        for (int64_t j = 0; j < sp.n; ++j) gsum += go[base + j * sp.inner];
        for (int64_t j = 0; j < sp.n; ++j) {
          const int64_t k = base + j * sp.inner;
          gx[k] += go[k] - std::exp(vo[k]) * gsum;
        }
      }
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
static void check_logits_1d(const Shape& s, int target) {
  if (s.size() != 1) throw ShapeError("expected 1-D logits");
  if (target < 0 || target >= s[0])
    throw ContractError("target index out of range");
}

template <typename T>
Tensor<T> cross_entropy(Tensor<T> logits, int target) {
  Graph<T>& g = *logits.g;
  const Shape& s = g.shape(logits.id);
  check_logits_1d<T>(s, target);
  const auto& vz = g.value(logits.id);
  const int n = s[0];
  T mx = vz[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, vz[j]);
  T denom = T(0);
  for (int j = 0; j < n; ++j) denom += std::exp(vz[j] - mx);
  const T lse = mx + std::log(denom);
  const int zid = logits.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({1}, {lse - vz[target]}, {zid}, [zid, oid, target, n](Graph<T>& gg) {
    const T go = gg.grad_ref(oid)[0];
    const auto& vz2 = gg.value(zid);
    auto& gz = gg.grad_ref(zid);
    T mx2 = vz2[0];
    for (int j = 1; j < n; ++j) mx2 = std::max(mx2, vz2[j]);
    T denom2 = T(0);
    for (int j = 0; j < n; ++j) denom2 += std::exp(vz2[j] - mx2);
    for (int j = 0; j < n; ++j) {
      T sj = std::exp(vz2[j] - mx2) / denom2;
      gz[j] += go * (sj - (j == target ? T(1) : T(0)));
    }
  });
  return Tensor<T>{&g, oid};
}

template <typename T>
Tensor<T> target_prob(Tensor<T> logits, int target) {
  Graph<T>& g = *logits.g;
  const Shape& s = g.shape(logits.id);
  check_logits_1d<T>(s, target);
  const auto& vz = g.value(logits.id);
  const int n = s[0];
  T mx = vz[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, vz[j]);
  T denom = T(0);
  for (int j = 0; j < n; ++j) denom += std::exp(vz[j] - mx);
  const T pt = std::exp(vz[target] - mx) / denom;
  const int zid = logits.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({1}, {pt}, {zid}, [zid, oid, target, n](Graph<T>& gg) {
    const T go = gg.grad_ref(oid)[0];
    const T p = gg.value(oid)[0];
    const auto& vz2 = gg.value(zid);
    auto& gz = gg.grad_ref(zid);
    T mx2 = vz2[0];
    for (int j = 1; j < n; ++j) mx2 = std::max(mx2, vz2[j]);
    T denom2 = T(0);
    for (int j = 0; j < n; ++j) denom2 += std::exp(vz2[j] - mx2);
    for (int j = 0; j < n; ++j) {
      T sj = std::exp(vz2[j] - mx2) / denom2;
      gz[j] += go * p * ((j == target ? T(1) : T(0)) - sj);
    }
  });
  return Tensor<T>{&g, oid};
}

// ---------------------------------------------------------------------------
// Pointer shift

template <typename T>
Tensor<T> shift1d(Tensor<T> p, ShiftDir dir) {
  Graph<T>& g = *p.g;
  const Shape& s = g.shape(p.id);
  if (s.size() != 1) throw ShapeError("shift1d expects a 1-D pointer");
  const int L = s[0];
  const auto& vp = g.value(p.id);
  std::vector<T> out(L, T(0));
  if (dir == ShiftDir::decrement) {
    for (int i = 0; i + 1 < L; ++i) out[i] = vp[i + 1];
  } else {
    for (int i = 1; i < L; ++i) out[i] = vp[i - 1];
  }
  const int pid = p.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(s, std::move(out), {pid}, [pid, oid, L, dir](Graph<T>& gg) {
    const auto& go = gg.grad_ref(oid);
    auto& gp = gg.grad_ref(pid);
    if (dir == ShiftDir::decrement) {
      for (int i = 0; i + 1 < L; ++i) gp[i + 1] += go[i];
    } else {
      for (int i = 1; i < L; ++i) gp[i - 1] += go[i];
    }
  });
  return Tensor<T>{&g, oid};
}

// ---------------------------------------------------------------------------
// Embedding gather

template <typename T>
Tensor<T> embed(Tensor<T> E, const std::vector<int>& ids) {
  Graph<T>& g = *E.g;
  const Shape& es = g.shape(E.id);
  if (es.size() != 2) throw ShapeError("embed expects [V,d] table");
  if (ids.empty()) throw ContractError("embed: empty id list");
  const int v = es[0], d = es[1];
  for (int idx : ids)
    if (idx < 0 || idx >= v) throw ContractError("embed: id out of range");
  const auto& ve = g.value(E.id);
  std::vector<T> out;
  out.reserve(ids.size() * d);
  for (int idx : ids)
    out.insert(out.end(), ve.begin() + int64_t(idx) * d,
               ve.begin() + int64_t(idx + 1) * d);
  const int eid = E.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node({static_cast<int>(ids.size()), d}, std::move(out), {eid},
             [eid, oid, ids, d](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               auto& ge = gg.grad_ref(eid);
               for (size_t s = 0; s < ids.size(); ++s)
                 for (int j = 0; j < d; ++j)
                   ge[int64_t(ids[s]) * d + j] += go[s * d + j];
             });
  return Tensor<T>{&g, oid};
}

// ---------------------------------------------------------------------------
// Six-operator mixture node

template <typename T>
Tensor<T> node_mix(Tensor<T> x1, Tensor<T> x2, Tensor<T> probs,
                   const std::array<uint8_t, 6>& mask) {
  if (x1.g != x2.g || x1.g != probs.g)
    throw ContractError("node_mix: operands on distinct tapes");
  Graph<T>& g = *x1.g;
  if (numel(g.shape(probs.id)) != 6)
    throw ShapeError("node_mix: probs must have 6 entries");
  Broadcast2 bc = Broadcast2::make(g.shape(x1.id), g.shape(x2.id));
  const auto& va = g.value(x1.id);
  const auto& vb = g.value(x2.id);
  const auto& ap = g.value(probs.id);
  std::array<T, 6> c;
  for (int i = 0; i < 6; ++i) c[i] = mask[i] ? ap[i] : T(0);
  std::vector<T> out(numel(bc.out));
  broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
    const T x = va[ia], y = vb[ib];
    const T mn = y < x ? y : x;
    const T mx = y > x ? y : x;
    out[io] = c[0] * mn + c[1] * mx + c[2] * (x + y) + c[3] * (x * y) +
              c[4] * x + c[5] * y;
  });
  const int aid = x1.id, bid = x2.id, pid = probs.id;
  const int oid = static_cast<int>(g.num_nodes());
  g.add_node(bc.out, std::move(out), {aid, bid, pid},
             [aid, bid, pid, oid, bc, mask](Graph<T>& gg) {
               const auto& go = gg.grad_ref(oid);
               const auto& va2 = gg.value(aid);
               const auto& vb2 = gg.value(bid);
               const auto& ap2 = gg.value(pid);
               auto& ga = gg.grad_ref(aid);
               auto& gb = gg.grad_ref(bid);
               auto& gp = gg.grad_ref(pid);
               std::array<T, 6> c2;
               for (int i = 0; i < 6; ++i) c2[i] = mask[i] ? ap2[i] : T(0);
               std::array<T, 6> acc{};  // d loss / d probs_i (pre-mask)
               broadcast_for_each(bc, [&](int64_t io, int64_t ia, int64_t ib) {
                 const T gv = go[io];
                 const T x = va2[ia], y = vb2[ib];
                 const T mn = y < x ? y : x;
                 const T mx = y > x ? y : x;
                 const bool a_min = x <= y;  // ties route to x1
                 const bool a_max = x >= y;
                 ga[ia] += gv * ((a_min ? c2[0] : T(0)) + (a_max ? c2[1] : T(0)) +
                                 c2[2] + c2[3] * y + c2[4]);
                 gb[ib] += gv * ((a_min ? T(0) : c2[0]) + (a_max ? T(0) : c2[1]) +
                                 c2[2] + c2[3] * x + c2[5]);
                 acc[0] += gv * mn;
                 acc[1] += gv * mx;
                 acc[2] += gv * (x + y);
                 acc[3] += gv * (x * y);
                 acc[4] += gv * x;
                 acc[5] += gv * y;
               });
               for (int i = 0; i < 6; ++i)
                 if (mask[i]) gp[i] += acc[i];
             });
  return Tensor<T>{&g, oid};
}

// ---------------------------------------------------------------------------
// LSTM cell (composite)

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(Tensor<T> x, Tensor<T> h_prev,
                                          Tensor<T> c_prev,
                                          const LstmParams<T>& p) {
  Graph<T>& g = *x.g;
  const Shape& ws = g.shape(p.wh.id);
  if (ws.size() != 2 || ws[0] % 4 != 0)
    throw ShapeError("lstm_step: wh must be [4d,d]");
  const int d = ws[1];
  if (ws[0] != 4 * d) throw ShapeError("lstm_step: wh must be [4d,d]");
  Tensor<T> gates = add(add(linear(p.wx, x), linear(p.wh, h_prev)), p.b);
  Tensor<T> gi = sigmoid(slice(gates, 0, d));
  Tensor<T> gf = sigmoid(slice(gates, d, d));
  Tensor<T> gc = softmodnet::tanh(slice(gates, 2 * d, d));
  Tensor<T> go = sigmoid(slice(gates, 3 * d, d));
  Tensor<T> c_next = add(mul(gf, c_prev), mul(gi, gc));
  Tensor<T> h_next = mul(go, softmodnet::tanh(c_next));
  return {h_next, c_next};
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define SMN_INSTANTIATE(T)                                                     \
  template struct Tensor<T>;                                                   \
  template class ParamStore<T>;                                                \
  template class Graph<T>;                                                     \
  template Tensor<T> add<T>(Tensor<T>, Tensor<T>);                             \
  template Tensor<T> sub<T>(Tensor<T>, Tensor<T>);                             \
  template Tensor<T> mul<T>(Tensor<T>, Tensor<T>);                             \
  template Tensor<T> vdiv<T>(Tensor<T>, Tensor<T>);                            \
  template Tensor<T> emin<T>(Tensor<T>, Tensor<T>);                            \
  template Tensor<T> emax<T>(Tensor<T>, Tensor<T>);                            \
  template Tensor<T> affine<T>(Tensor<T>, T, T);                               \
  template Tensor<T> relu<T>(Tensor<T>);                                       \
  template Tensor<T> sigmoid<T>(Tensor<T>);                                    \
  template Tensor<T> tanh<T>(Tensor<T>);                                       \
  template Tensor<T> log<T>(Tensor<T>);                                        \
  template Tensor<T> sqrt<T>(Tensor<T>);                                       \
  template Tensor<T> exp<T>(Tensor<T>);                                        \
  template Tensor<T> reshape<T>(Tensor<T>, Shape);                             \
  template Tensor<T> slice<T>(Tensor<T>, int64_t, int64_t);                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&);                 \
  template Tensor<T> stack_rows<T>(const std::vector<Tensor<T>>&);             \
  template Tensor<T> sum_all<T>(Tensor<T>);                                    \
  template Tensor<T> sum_spatial<T>(Tensor<T>);                                \
  template Tensor<T> linear<T>(Tensor<T>, Tensor<T>);                          \
  template Tensor<T> linear<T>(Tensor<T>, Tensor<T>, Tensor<T>);               \
  template Tensor<T> rowsum_weighted<T>(Tensor<T>, Tensor<T>);                 \
  template Tensor<T> conv1x1<T>(Tensor<T>, Tensor<T>);                         \
  template Tensor<T> conv1x1<T>(Tensor<T>, Tensor<T>, Tensor<T>);              \
  template Tensor<T> softmax<T>(Tensor<T>, int);                               \
  template Tensor<T> log_softmax<T>(Tensor<T>, int);                           \
  template Tensor<T> cross_entropy<T>(Tensor<T>, int);                         \
  template Tensor<T> target_prob<T>(Tensor<T>, int);                           \
  template Tensor<T> shift1d<T>(Tensor<T>, ShiftDir);                          \
  template Tensor<T> embed<T>(Tensor<T>, const std::vector<int>&);             \
  template Tensor<T> node_mix<T>(Tensor<T>, Tensor<T>, Tensor<T>,              \
                                 const std::array<uint8_t, 6>&);               \
  template std::pair<Tensor<T>, Tensor<T>> lstm_step<T>(                       \
      Tensor<T>, Tensor<T>, Tensor<T>, const LstmParams<T>&);                  \
  template bool all_finite<T>(const std::vector<T>&);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)

#undef SMN_INSTANTIATE

}  // namespace softmodnet
