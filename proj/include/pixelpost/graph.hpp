// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pixelpost/tensor.hpp"

namespace pixelpost {

// The closed catalog of differentiable primitives. Every op here has a
// forward kernel for float and double and a registered backward rule for
// float; the backward rules are what the finite-difference oracle audits.
enum class Op : uint8_t {
  kConstant,
  kParam,
  kDense,
  kConv2d,
  kUpsampleNearest2x,
  kGroupNorm,
  kLayerNorm,
  kAttention,
  kSilu,
  kGelu,
  kTanh,
  kSoftmax,
  kLogSigmoid,
  kAdd,
  kMul,
  kScale,
  kAddConst,
  kAddRowsTokens,
  kAddRowsSpatial,
  kAddPositional,
  kMse,
  kMsePerSample,
  kMeanAll,
  kPatchify,
  kUnpatchify,
  kConcatChannels,
  kEmbedding,
};

const char* op_name(Op op);

// Static attributes of a node. One bag shared by all ops; each op reads only
// the fields its kernel documents.
struct NodeAttrs {
  int stride = 1;
  int pad = 0;
  int groups = 1;
  int heads = 1;
  int patch = 1;
  int out_c = 0;
  int out_h = 0;
  int out_w = 0;
  double scalar = 0.0;
  double eps = 1e-5;
  std::vector<int> indices;  // embedding lookup rows
};

template <typename S>
struct NodeT {
  Op op = Op::kConstant;
  std::vector<int32_t> in;
  NodeAttrs attrs;
  // Small per-op extras needed by the backward rule (norm statistics,
  // attention probabilities). Bulk activations are not duplicated here; the
  // trace already owns every node's output.
  std::vector<TensorT<S>> saved;
  bool needs_grad = false;
};

// A recorded forward computation: one node per value, inputs always refer to
// earlier ids, so the vector order is a topological order. Replaying the
// nodes in order reproduces every value bit-for-bit.
template <typename S>
struct TraceT {
  std::vector<NodeT<S>> nodes;
  std::vector<TensorT<S>> values;
  std::vector<int32_t> param_ids;  // gradient targets, registration order
  int32_t output_id = -1;
};

using Trace = TraceT<float>;

// Records ops as they execute. Shape validation happens at record time, so a
// malformed graph fails at the op that built it, not deep inside backward.
template <typename S>
class TapeT {
 public:
  using Scalar = S;

  int32_t constant(TensorT<S> value);
  int32_t param(TensorT<S> value);

  // y = x @ w + b with x: [..., K] (leading dims flattened), w: [K, M], b: [M].
  int32_t dense(int32_t x, int32_t w, int32_t b);
  // x: [N,C,H,W], w: [F,C,kh,kw], b: [F]; zero padding, stride 1 or 2.
  int32_t conv2d(int32_t x, int32_t w, int32_t b, int stride, int pad);
  int32_t upsample_nearest_2x(int32_t x);
  int32_t group_norm(int32_t x, int32_t gamma, int32_t beta, int groups, double eps = 1e-5);
  // Normalizes the trailing dimension.
  int32_t layer_norm(int32_t x, int32_t gamma, int32_t beta, double eps = 1e-5);
  // Scaled dot-product attention over q,k,v: [N,T,C] with C % heads == 0.
  int32_t attention(int32_t q, int32_t k, int32_t v, int heads);
  int32_t silu(int32_t x);
  int32_t gelu(int32_t x);
  int32_t tanh_(int32_t x);
  int32_t softmax(int32_t x);  // trailing dimension
  int32_t log_sigmoid(int32_t x);
  int32_t add(int32_t a, int32_t b);
  int32_t mul(int32_t a, int32_t b);
  int32_t scale(int32_t x, double c);
  int32_t add_const(int32_t x, double c);
  // x: [N,T,C] + v: [N,C], broadcast over tokens.
  int32_t add_rows_tokens(int32_t x, int32_t v);
  // x: [N,C,H,W] + v: [N,C], broadcast over the spatial grid.
  int32_t add_rows_spatial(int32_t x, int32_t v);
  // x: [N,T,C] + p: [T,C], broadcast over the batch.
  int32_t add_positional(int32_t x, int32_t p);
  // Mean over all elements of (a-b)^2 -> [1].
  int32_t mse(int32_t a, int32_t b);
  // Per-sample mean of (a-b)^2 over non-batch dims -> [N].
  int32_t mse_per_sample(int32_t a, int32_t b);
  int32_t mean_all(int32_t x);
  // [N,C,H,W] -> [N, (H/p)*(W/p), C*p*p]; tokens scan the patch grid
  // row-major, features are ordered (c, py, px).
  int32_t patchify(int32_t x, int patch);
  int32_t unpatchify(int32_t x, int patch, int out_c, int out_h, int out_w);
  int32_t concat_channels(int32_t a, int32_t b);
  // table: [V, C], one row gathered per index -> [N, C].
  int32_t embedding(int32_t table, std::vector<int> indices);

  // a - b as add(a, scale(b, -1)); convenience, not a distinct primitive.
  int32_t sub(int32_t a, int32_t b) { return add(a, scale(b, -1.0)); }

  const TensorT<S>& val(int32_t id) const { return trace_.values.at(static_cast<size_t>(id)); }
  int32_t size() const { return static_cast<int32_t>(trace_.nodes.size()); }

  TraceT<S> finish(int32_t output_id);

 private:
  int32_t push(Op op, std::vector<int32_t> in, NodeAttrs attrs, std::vector<int> out_shape);
  const std::vector<int>& shape_of(int32_t id) const;
  void check_id(int32_t id, const char* who) const;

  TraceT<S> trace_;
};

using Tape = TapeT<float>;

template <typename S>
using GraphFnT = std::function<int32_t(TapeT<S>&, const std::vector<int32_t>&, const std::vector<int32_t>&)>;
using GraphFn = GraphFnT<float>;
using GraphFnD = GraphFnT<double>;

template <typename S>
struct EvalResultT {
  TensorT<S> output;
  TraceT<S> trace;
};

// Runs fn once, recording the trace. Inputs become constants (no gradients
// reported, but gradients still flow through them to any parameter upstream);
// params become gradient targets in the given order.
template <typename S>
EvalResultT<S> evaluate(const GraphFnT<S>& fn, std::vector<TensorT<S>> inputs,
                        std::vector<TensorT<S>> params);

// Reverse-mode sweep over a recorded trace. seed must match the output shape
// (ones for a scalar loss). Returns one gradient per param leaf, in
// registration order; params the output never touched get zeros.
std::vector<Tensor> gradient(const Trace& trace, const Tensor& seed);

// Recomputes every non-leaf value in place and returns the output. Used to
// assert that traces replay bit-for-bit.
template <typename S>
TensorT<S> replay_forward(TraceT<S>& trace);

// Forward kernel shared by record and replay paths. Fills values[id] (and the
// node's saved tensors) from its inputs.
template <typename S>
void compute_forward(TraceT<S>& trace, int32_t id);

}  // namespace pixelpost
