#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "softmodnet/tensor.hpp"
#include "softmodnet/util.hpp"

namespace softmodnet {

template <typename T>
class Graph;

// Lightweight handle into a Graph's tape. Copying is free; the value lives in
// the graph node.
template <typename T>
struct Tensor {
  Graph<T>* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Shape& shape() const;
  int64_t size() const;
  const std::vector<T>& value() const;
  T scalar_value() const;
};

// Named parameter registry. Entries keep registration order, which fixes
// checkpoint layout and every gradient-reduction order.
template <typename T>
struct ParamEntry {
  std::string name;
  Shape shape;
  bool is_arch = false;  // architecture (alpha) parameter vs weight parameter
  std::vector<T> value;
};

template <typename T>
class ParamStore {
 public:
  int add(std::string name, Shape shape, std::vector<T> value,
          bool is_arch = false);
  int add_zeros(std::string name, Shape shape, bool is_arch = false);
  // Uniform init in [-bound, +bound].
  int add_uniform(std::string name, Shape shape, Rng& rng, double bound,
                  bool is_arch = false);

  int find(const std::string& name) const;  // -1 when absent
  int size() const { return static_cast<int>(entries_.size()); }
  ParamEntry<T>& entry(int id) { return entries_[id]; }
  const ParamEntry<T>& entry(int id) const { return entries_[id]; }
  std::vector<int> ids(bool is_arch) const;
  std::vector<int> all_ids() const;
  int64_t total_elems() const;

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, int> by_name_;
};

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them in strict reverse order, accumulating into each consumer's inputs.
// One backward pass per graph; a second call is rejected.
template <typename T>
class Graph {
 public:
  Graph() = default;
  explicit Graph(ParamStore<T>* store) : store_(store) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<T> constant(Shape shape, std::vector<T> value);
  Tensor<T> scalar(T v);
  Tensor<T> zeros(Shape shape);
  // Differentiable leaf not bound to the store (for tests and probes).
  Tensor<T> variable(Shape shape, std::vector<T> value);
  // Differentiable leaf bound to a store entry; one node per entry per graph.
  Tensor<T> param(int pid);

  void backward(const Tensor<T>& loss);
  bool backward_done() const { return backward_done_; }

  const Shape& shape(int id) const { return nodes_[id].shape; }
  const std::vector<T>& value(int id) const { return nodes_[id].value; }
  const std::vector<T>& grad(int id) const;
  // Gradient for a store entry; zeros when the entry is unused in this graph.
  std::vector<T> param_grad(int pid) const;

  size_t num_nodes() const { return nodes_.size(); }
  ParamStore<T>* store() const { return store_; }

  // --- construction internals used by the op free functions ---
  int add_node(Shape shape, std::vector<T> value, const std::vector<int>& inputs,
               std::function<void(Graph&)> back);
  std::vector<T>& grad_ref(int id) { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };
  std::vector<Node> nodes_;
  std::map<int, int> param_nodes_;  // store id -> node id
  ParamStore<T>* store_ = nullptr;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Ops. All support reverse-mode gradients. Binary elementwise ops broadcast
// numpy-style (right-aligned; extent 1 stretches; one-element tensors act as
// scalars). min/max route the gradient to the first argument on ties.

template <typename T> Tensor<T> add(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> sub(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> mul(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> vdiv(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> emin(Tensor<T> a, Tensor<T> b);
template <typename T> Tensor<T> emax(Tensor<T> a, Tensor<T> b);

// y = mul_c * x + add_c, elementwise.
template <typename T> Tensor<T> affine(Tensor<T> x, T mul_c, T add_c);
template <typename T> Tensor<T> relu(Tensor<T> x);
template <typename T> Tensor<T> sigmoid(Tensor<T> x);
template <typename T> Tensor<T> tanh(Tensor<T> x);
template <typename T> Tensor<T> log(Tensor<T> x);
template <typename T> Tensor<T> sqrt(Tensor<T> x);
template <typename T> Tensor<T> exp(Tensor<T> x);

template <typename T> Tensor<T> reshape(Tensor<T> x, Shape shape);
// Flat 1-D slice [offset, offset+len) of x's storage.
template <typename T> Tensor<T> slice(Tensor<T> x, int64_t offset, int64_t len);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts);
// Stacks n same-shaped tensors into [n, numel(part)].
template <typename T> Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows);

template <typename T> Tensor<T> sum_all(Tensor<T> x);           // -> [1]
template <typename T> Tensor<T> sum_spatial(Tensor<T> x);       // [H,W,C] -> [C]
// y = W x (+ b). W: [m,n], x: [n], b: [m].
template <typename T> Tensor<T> linear(Tensor<T> W, Tensor<T> x);
template <typename T> Tensor<T> linear(Tensor<T> W, Tensor<T> x, Tensor<T> b);
// out[j] = sum_s w[s] * M[s,j]. M: [S,d], w: [S].
template <typename T> Tensor<T> rowsum_weighted(Tensor<T> M, Tensor<T> w);
// Per-pixel affine map. x: [H,W,Ci], K: [Ci,Co], b: [Co].
template <typename T> Tensor<T> conv1x1(Tensor<T> x, Tensor<T> K);
template <typename T> Tensor<T> conv1x1(Tensor<T> x, Tensor<T> K, Tensor<T> b);

template <typename T> Tensor<T> softmax(Tensor<T> x, int axis);
template <typename T> Tensor<T> log_softmax(Tensor<T> x, int axis);
// lse(z) - z[target], scalar.
template <typename T> Tensor<T> cross_entropy(Tensor<T> logits, int target);
// softmax(z)[target], scalar.
template <typename T> Tensor<T> target_prob(Tensor<T> logits, int target);

enum class ShiftDir { decrement, increment };
// Linear pointer shift with zero padding: decrement moves mass toward index
// 0, increment toward index L-1; mass crossing an edge is dropped.
template <typename T> Tensor<T> shift1d(Tensor<T> p, ShiftDir dir);

// Gathers rows of E: [V,d] at ids -> [S,d]; gradient scatters into E.
template <typename T> Tensor<T> embed(Tensor<T> E, const std::vector<int>& ids);

// Six-operator mixture node: out = sum_i mask_i * probs_i * op_i(x1, x2) with
// op order [min, max, sum, product, choose_1, choose_2]. probs: [6].
template <typename T>
Tensor<T> node_mix(Tensor<T> x1, Tensor<T> x2, Tensor<T> probs,
                   const std::array<uint8_t, 6>& mask);

template <typename T>
struct LstmParams {
  Tensor<T> wx;  // [4d, in]
  Tensor<T> wh;  // [4d, d]
  Tensor<T> b;   // [4d]
};

// Standard LSTM cell, gate order (input, forget, cell, output).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(Tensor<T> x, Tensor<T> h_prev,
                                          Tensor<T> c_prev,
                                          const LstmParams<T>& p);

template <typename T>
bool all_finite(const std::vector<T>& v);

}  // namespace softmodnet
