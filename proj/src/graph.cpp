// SPDX-License-Identifier: Apache-2.0

#include "pixelpost/graph.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "gemm.hpp"

namespace pixelpost {

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kDense: return "dense";
    case Op::kConv2d: return "conv2d";
    case Op::kUpsampleNearest2x: return "upsample_nearest_2x";
    case Op::kGroupNorm: return "group_norm";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kAttention: return "attention";
    case Op::kSilu: return "silu";
    case Op::kGelu: return "gelu";
    case Op::kTanh: return "tanh";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSigmoid: return "log_sigmoid";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddConst: return "add_const";
    case Op::kAddRowsTokens: return "add_rows_tokens";
    case Op::kAddRowsSpatial: return "add_rows_spatial";
    case Op::kAddPositional: return "add_positional";
    case Op::kMse: return "mse";
    case Op::kMsePerSample: return "mse_per_sample";
    case Op::kMeanAll: return "mean_all";
    case Op::kPatchify: return "patchify";
    case Op::kUnpatchify: return "unpatchify";
    case Op::kConcatChannels: return "concat_channels";
    case Op::kEmbedding: return "embedding";
  }
  return "?";
}

namespace {

std::string shapes_msg(const char* who, const std::vector<std::vector<int>>& shapes) {
  std::string msg(who);
  msg += ":";
  for (const auto& s : shapes) {
    msg += " ";
    msg += Tensor::shape_str(s);
  }
  return msg;
}

[[noreturn]] void shape_fail(const char* who, const std::vector<std::vector<int>>& shapes,
                             const char* detail) {
  throw ShapeError(std::string(who) + ": " + detail + " (" + shapes_msg("got", shapes) + ")");
}

// Conv output extent with zero padding; floor semantics.
int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* col) {
  // col is [C*kh*kw, Ho*Wo]; one column per output position.
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        S* row = col + (static_cast<int64_t>((c * kh + ky) * kw + kx)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = S(0);
            continue;
          }
          const S* xrow = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? S(0) : xrow[ix];
          }
        }
      }
    }
  }
}

template <typename S>
void softmax_rows(S* p, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    S* row = p + static_cast<int64_t>(r) * cols;
    S mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += static_cast<double>(row[c]);
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int c = 0; c < cols; ++c) row[c] *= inv;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

template <typename S>
void compute_forward(TraceT<S>& tr, int32_t id) {
  NodeT<S>& node = tr.nodes[static_cast<size_t>(id)];
  TensorT<S>& out = tr.values[static_cast<size_t>(id)];
  auto in_val = [&](int i) -> const TensorT<S>& {
    return tr.values[static_cast<size_t>(node.in[static_cast<size_t>(i)])];
  };
  node.saved.clear();

  switch (node.op) {
    case Op::kConstant:
    case Op::kParam:
      return;

    case Op::kDense: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& w = in_val(1);
      const TensorT<S>& b = in_val(2);
      const int K = w.shape[0], M = w.shape[1];
      const int R = static_cast<int>(x.numel() / K);
      ECMap<S> X(x.data.data(), R, K);
      ECMap<S> W(w.data.data(), K, M);
      EMap<S> Y(out.data.data(), R, M);
      Y.noalias() = X * W;
      Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data.data(), M);
      return;
    }

    case Op::kConv2d: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& w = in_val(1);
      const TensorT<S>& b = in_val(2);
      const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      const int F = w.shape[0], kh = w.shape[2], kw = w.shape[3];
      const int Ho = out.shape[2], Wo = out.shape[3];
      const int ck2 = C * kh * kw, hw = Ho * Wo;
      std::vector<S> col(static_cast<size_t>(ck2) * hw);
      ECMap<S> Wm(w.data.data(), F, ck2);
      ECVecMap<S> bias(b.data.data(), F);
      for (int n = 0; n < N; ++n) {
        im2col(x.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw,
               node.attrs.stride, node.attrs.pad, Ho, Wo, col.data());
        ECMap<S> Col(col.data(), ck2, hw);
        EMap<S> Yn(out.data.data() + static_cast<int64_t>(n) * F * hw, F, hw);
        Yn.noalias() = Wm * Col;
        Yn.colwise() += bias;
      }
      return;
    }

    case Op::kUpsampleNearest2x: {
      const TensorT<S>& x = in_val(0);
      const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      for (int nc = 0; nc < N * C; ++nc) {
        const S* src = x.data.data() + static_cast<int64_t>(nc) * H * W;
        S* dst = out.data.data() + static_cast<int64_t>(nc) * 4 * H * W;
        for (int y = 0; y < H; ++y) {
          for (int x2 = 0; x2 < W; ++x2) {
            const S v = src[y * W + x2];
            S* d = dst + (2 * y) * (2 * W) + 2 * x2;
            d[0] = v;
            d[1] = v;
            d[2 * W] = v;
            d[2 * W + 1] = v;
          }
        }
      }
      return;
    }

    case Op::kGroupNorm: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& gamma = in_val(1);
      const TensorT<S>& beta = in_val(2);
      const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      const int G = node.attrs.groups, Cg = C / G;
      const int64_t group_elems = static_cast<int64_t>(Cg) * H * W;
      TensorT<S> mean({N * G}), rstd({N * G});
      for (int n = 0; n < N; ++n) {
        for (int g = 0; g < G; ++g) {
          const S* base = x.data.data() + (static_cast<int64_t>(n) * C + g * Cg) * H * W;
          double sum = 0.0, sq = 0.0;
          for (int64_t i = 0; i < group_elems; ++i) {
            const double v = static_cast<double>(base[i]);
            sum += v;
            sq += v * v;
          }
          const double m = sum / static_cast<double>(group_elems);
          const double var = sq / static_cast<double>(group_elems) - m * m;
          const double rs = 1.0 / std::sqrt(var + node.attrs.eps);
          mean[n * G + g] = static_cast<S>(m);
          rstd[n * G + g] = static_cast<S>(rs);
          S* dst = out.data.data() + (static_cast<int64_t>(n) * C + g * Cg) * H * W;
          for (int cg = 0; cg < Cg; ++cg) {
            const int c = g * Cg + cg;
            const S ga = gamma[c], be = beta[c];
            const S* sp = base + static_cast<int64_t>(cg) * H * W;
            S* dp = dst + static_cast<int64_t>(cg) * H * W;
            for (int i = 0; i < H * W; ++i) {
              dp[i] = static_cast<S>((static_cast<double>(sp[i]) - m) * rs) * ga + be;
            }
          }
        }
      }
      node.saved.push_back(std::move(mean));
      node.saved.push_back(std::move(rstd));
      return;
    }

    case Op::kLayerNorm: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& gamma = in_val(1);
      const TensorT<S>& beta = in_val(2);
      const int C = x.shape.back();
      const int64_t rows = x.numel() / C;
      TensorT<S> mean({static_cast<int>(rows)}), rstd({static_cast<int>(rows)});
      for (int64_t r = 0; r < rows; ++r) {
        const S* row = x.data.data() + r * C;
        double sum = 0.0, sq = 0.0;
        for (int c = 0; c < C; ++c) {
          const double v = static_cast<double>(row[c]);
          sum += v;
          sq += v * v;
        }
        const double m = sum / C;
        const double var = sq / C - m * m;
        const double rs = 1.0 / std::sqrt(var + node.attrs.eps);
        mean[r] = static_cast<S>(m);
        rstd[r] = static_cast<S>(rs);
        S* dst = out.data.data() + r * C;
        for (int c = 0; c < C; ++c) {
          dst[c] = static_cast<S>((static_cast<double>(row[c]) - m) * rs) * gamma[c] + beta[c];
        }
      }
      node.saved.push_back(std::move(mean));
      node.saved.push_back(std::move(rstd));
      return;
    }

    case Op::kAttention: {
      const TensorT<S>& q = in_val(0);
      const TensorT<S>& k = in_val(1);
      const TensorT<S>& v = in_val(2);
      const int N = q.shape[0], T = q.shape[1], C = q.shape[2];
      const int Hn = node.attrs.heads, Dh = C / Hn;
      const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(Dh)));
      TensorT<S> probs({N, Hn, T, T});
      std::vector<S> Qb(static_cast<size_t>(T) * Dh), Kb(Qb.size()), Vb(Qb.size()),
          Ob(Qb.size());
      for (int n = 0; n < N; ++n) {
        for (int h = 0; h < Hn; ++h) {
          for (int t = 0; t < T; ++t) {
            const int64_t src = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
            std::memcpy(Qb.data() + static_cast<int64_t>(t) * Dh, q.data.data() + src,
                        sizeof(S) * Dh);
            std::memcpy(Kb.data() + static_cast<int64_t>(t) * Dh, k.data.data() + src,
                        sizeof(S) * Dh);
            std::memcpy(Vb.data() + static_cast<int64_t>(t) * Dh, v.data.data() + src,
                        sizeof(S) * Dh);
          }
          S* P = probs.data.data() + (static_cast<int64_t>(n) * Hn + h) * T * T;
          EMap<S> Pm(P, T, T);
          Pm.noalias() = ECMap<S>(Qb.data(), T, Dh) * ECMap<S>(Kb.data(), T, Dh).transpose();
          Pm *= scale;
          softmax_rows(P, T, T);
          EMap<S> Om(Ob.data(), T, Dh);
          Om.noalias() = ECMap<S>(P, T, T) * ECMap<S>(Vb.data(), T, Dh);
          for (int t = 0; t < T; ++t) {
            const int64_t dst = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
            std::memcpy(out.data.data() + dst, Ob.data() + static_cast<int64_t>(t) * Dh,
                        sizeof(S) * Dh);
          }
        }
      }
      node.saved.push_back(std::move(probs));
      return;
    }

    case Op::kSilu: {
      const TensorT<S>& x = in_val(0);
      for (int64_t i = 0; i < x.numel(); ++i) {
        const S xv = x[i];
        out[i] = xv / (S(1) + std::exp(-xv));
      }
      return;
    }

    case Op::kGelu: {
      const TensorT<S>& x = in_val(0);
      const S inv_sqrt2 = static_cast<S>(0.7071067811865475);
      for (int64_t i = 0; i < x.numel(); ++i) {
        const S xv = x[i];
        out[i] = S(0.5) * xv * (S(1) + std::erf(xv * inv_sqrt2));
      }
      return;
    }

    case Op::kTanh: {
      const TensorT<S>& x = in_val(0);
      for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
      return;
    }

    case Op::kSoftmax: {
      const TensorT<S>& x = in_val(0);
      const int C = x.shape.back();
      out.data = x.data;
      softmax_rows(out.data.data(), static_cast<int>(x.numel() / C), C);
      return;
    }

    case Op::kLogSigmoid: {
      const TensorT<S>& x = in_val(0);
      for (int64_t i = 0; i < x.numel(); ++i) {
        const S xv = x[i];
        // log(sigmoid(x)) = -softplus(-x), split for stability on both tails.
        out[i] = xv >= S(0) ? -std::log1p(std::exp(-xv)) : xv - std::log1p(std::exp(xv));
      }
      return;
    }

    case Op::kAdd: {
      const TensorT<S>& a = in_val(0);
      const TensorT<S>& b = in_val(1);
      for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
      return;
    }

    case Op::kMul: {
      const TensorT<S>& a = in_val(0);
      const TensorT<S>& b = in_val(1);
      for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
      return;
    }

    case Op::kScale: {
      const TensorT<S>& x = in_val(0);
      const S c = static_cast<S>(node.attrs.scalar);
      for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
      return;
    }

    case Op::kAddConst: {
      const TensorT<S>& x = in_val(0);
      const S c = static_cast<S>(node.attrs.scalar);
      for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
      return;
    }

    case Op::kAddRowsTokens: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& vv = in_val(1);
      const int N = x.shape[0], T = x.shape[1], C = x.shape[2];
      for (int n = 0; n < N; ++n) {
        const S* vr = vv.data.data() + static_cast<int64_t>(n) * C;
        for (int t = 0; t < T; ++t) {
          const int64_t base = (static_cast<int64_t>(n) * T + t) * C;
          for (int c = 0; c < C; ++c) out[base + c] = x[base + c] + vr[c];
        }
      }
      return;
    }

    case Op::kAddRowsSpatial: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& vv = in_val(1);
      const int N = x.shape[0], C = x.shape[1];
      const int hw = x.shape[2] * x.shape[3];
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const S add = vv[static_cast<int64_t>(n) * C + c];
          const int64_t base = (static_cast<int64_t>(n) * C + c) * hw;
          for (int i = 0; i < hw; ++i) out[base + i] = x[base + i] + add;
        }
      }
      return;
    }

    case Op::kAddPositional: {
      const TensorT<S>& x = in_val(0);
      const TensorT<S>& p = in_val(1);
      const int N = x.shape[0];
      const int64_t tc = p.numel();
      for (int n = 0; n < N; ++n) {
        const int64_t base = static_cast<int64_t>(n) * tc;
        for (int64_t i = 0; i < tc; ++i) out[base + i] = x[base + i] + p[i];
      }
      return;
    }

    case Op::kMse: {
      const TensorT<S>& a = in_val(0);
      const TensorT<S>& b = in_val(1);
      double acc = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
      }
      out[0] = static_cast<S>(acc / static_cast<double>(a.numel()));
      return;
    }

    case Op::kMsePerSample: {
      const TensorT<S>& a = in_val(0);
      const TensorT<S>& b = in_val(1);
      const int N = a.shape[0];
      const int64_t row = a.numel() / N;
      for (int n = 0; n < N; ++n) {
        double acc = 0.0;
        const int64_t base = n * row;
        for (int64_t i = 0; i < row; ++i) {
          const double d = static_cast<double>(a[base + i]) - static_cast<double>(b[base + i]);
          acc += d * d;
        }
        out[n] = static_cast<S>(acc / static_cast<double>(row));
      }
      return;
    }

    case Op::kMeanAll: {
      const TensorT<S>& x = in_val(0);
      double acc = 0.0;
      for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
      out[0] = static_cast<S>(acc / static_cast<double>(x.numel()));
      return;
    }

    case Op::kPatchify: {
      const TensorT<S>& x = in_val(0);
      const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      const int p = node.attrs.patch, Hp = H / p, Wp = W / p;
      const int fdim = C * p * p;
      for (int n = 0; n < N; ++n) {
        for (int gy = 0; gy < Hp; ++gy) {
          for (int gx = 0; gx < Wp; ++gx) {
            const int t = gy * Wp + gx;
            S* dst = out.data.data() + (static_cast<int64_t>(n) * Hp * Wp + t) * fdim;
            for (int c = 0; c < C; ++c) {
              for (int py = 0; py < p; ++py) {
                const S* src = x.data.data() +
                               ((static_cast<int64_t>(n) * C + c) * H + gy * p + py) * W + gx * p;
                std::memcpy(dst + (static_cast<int64_t>(c) * p + py) * p, src, sizeof(S) * p);
              }
            }
          }
        }
      }
      return;
    }

    case Op::kUnpatchify: {
      const TensorT<S>& x = in_val(0);
      const int N = x.shape[0];
      const int C = node.attrs.out_c, H = node.attrs.out_h, W = node.attrs.out_w;
      const int p = node.attrs.patch, Hp = H / p, Wp = W / p;
      const int fdim = C * p * p;
      for (int n = 0; n < N; ++n) {
        for (int gy = 0; gy < Hp; ++gy) {
          for (int gx = 0; gx < Wp; ++gx) {
            const int t = gy * Wp + gx;
            const S* src = x.data.data() + (static_cast<int64_t>(n) * Hp * Wp + t) * fdim;
            for (int c = 0; c < C; ++c) {
              for (int py = 0; py < p; ++py) {
                S* dst = out.data.data() +
                         ((static_cast<int64_t>(n) * C + c) * H + gy * p + py) * W + gx * p;
                std::memcpy(dst, src + (static_cast<int64_t>(c) * p + py) * p, sizeof(S) * p);
              }
            }
          }
        }
      }
      return;
    }

    case Op::kConcatChannels: {
      const TensorT<S>& a = in_val(0);
      const TensorT<S>& b = in_val(1);
      const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
      const int64_t hw = static_cast<int64_t>(a.shape[2]) * a.shape[3];
      for (int n = 0; n < N; ++n) {
        std::memcpy(out.data.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw,
                    a.data.data() + static_cast<int64_t>(n) * Ca * hw, sizeof(S) * Ca * hw);
        std::memcpy(out.data.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * hw,
                    b.data.data() + static_cast<int64_t>(n) * Cb * hw, sizeof(S) * Cb * hw);
      }
      return;
    }

    case Op::kEmbedding: {
      const TensorT<S>& table = in_val(0);
      const int C = table.shape[1];
      const auto& idx = node.attrs.indices;
      for (size_t n = 0; n < idx.size(); ++n) {
        std::memcpy(out.data.data() + static_cast<int64_t>(n) * C,
                    table.data.data() + static_cast<int64_t>(idx[n]) * C, sizeof(S) * C);
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Tape: shape validation + node recording
// ---------------------------------------------------------------------------

template <typename S>
void TapeT<S>::check_id(int32_t id, const char* who) const {
  if (id < 0 || id >= size()) {
    throw ShapeError(std::string(who) + ": value id " + std::to_string(id) + " out of range");
  }
}

template <typename S>
const std::vector<int>& TapeT<S>::shape_of(int32_t id) const {
  return trace_.values[static_cast<size_t>(id)].shape;
}

template <typename S>
int32_t TapeT<S>::push(Op op, std::vector<int32_t> in, NodeAttrs attrs,
                       std::vector<int> out_shape) {
  NodeT<S> node;
  node.op = op;
  node.in = std::move(in);
  node.attrs = std::move(attrs);
  node.needs_grad = (op == Op::kParam);
  for (int32_t i : node.in) {
    node.needs_grad = node.needs_grad || trace_.nodes[static_cast<size_t>(i)].needs_grad;
  }
  trace_.nodes.push_back(std::move(node));
  trace_.values.emplace_back(std::move(out_shape));
  const int32_t id = size() - 1;
  compute_forward(trace_, id);
  return id;
}

template <typename S>
int32_t TapeT<S>::constant(TensorT<S> value) {
  trace_.nodes.push_back(NodeT<S>{});
  trace_.values.push_back(std::move(value));
  return size() - 1;
}

template <typename S>
int32_t TapeT<S>::param(TensorT<S> value) {
  NodeT<S> node;
  node.op = Op::kParam;
  node.needs_grad = true;
  trace_.nodes.push_back(std::move(node));
  trace_.values.push_back(std::move(value));
  const int32_t id = size() - 1;
  trace_.param_ids.push_back(id);
  return id;
}

template <typename S>
int32_t TapeT<S>::dense(int32_t x, int32_t w, int32_t b) {
  check_id(x, "dense");
  check_id(w, "dense");
  check_id(b, "dense");
  const auto& xs = shape_of(x);
  const auto& ws = shape_of(w);
  const auto& bs = shape_of(b);
  if (ws.size() != 2 || bs.size() != 1 || xs.empty() || xs.back() != ws[0] || bs[0] != ws[1]) {
    shape_fail("dense", {xs, ws, bs}, "wants x [...,K], w [K,M], b [M]");
  }
  std::vector<int> out = xs;
  out.back() = ws[1];
  return push(Op::kDense, {x, w, b}, {}, std::move(out));
}

template <typename S>
int32_t TapeT<S>::conv2d(int32_t x, int32_t w, int32_t b, int stride, int pad) {
  check_id(x, "conv2d");
  check_id(w, "conv2d");
  check_id(b, "conv2d");
  const auto& xs = shape_of(x);
  const auto& ws = shape_of(w);
  const auto& bs = shape_of(b);
  if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || ws[1] != xs[1] || bs[0] != ws[0]) {
    shape_fail("conv2d", {xs, ws, bs}, "wants x [N,C,H,W], w [F,C,kh,kw], b [F]");
  }
  if (stride != 1 && stride != 2) {
    throw ValueError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  const int Ho = conv_out(xs[2], ws[2], stride, pad);
  const int Wo = conv_out(xs[3], ws[3], stride, pad);
  if (Ho <= 0 || Wo <= 0) shape_fail("conv2d", {xs, ws}, "kernel larger than padded input");
  NodeAttrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  return push(Op::kConv2d, {x, w, b}, attrs, {xs[0], ws[0], Ho, Wo});
}

template <typename S>
int32_t TapeT<S>::upsample_nearest_2x(int32_t x) {
  check_id(x, "upsample_nearest_2x");
  const auto& xs = shape_of(x);
  if (xs.size() != 4) shape_fail("upsample_nearest_2x", {xs}, "wants [N,C,H,W]");
  return push(Op::kUpsampleNearest2x, {x}, {}, {xs[0], xs[1], 2 * xs[2], 2 * xs[3]});
}

template <typename S>
int32_t TapeT<S>::group_norm(int32_t x, int32_t gamma, int32_t beta, int groups, double eps) {
  check_id(x, "group_norm");
  check_id(gamma, "group_norm");
  check_id(beta, "group_norm");
  const auto& xs = shape_of(x);
  const auto& gs = shape_of(gamma);
  const auto& bs = shape_of(beta);
  if (xs.size() != 4 || gs.size() != 1 || bs.size() != 1 || gs[0] != xs[1] || bs[0] != xs[1]) {
    shape_fail("group_norm", {xs, gs, bs}, "wants x [N,C,H,W], gamma [C], beta [C]");
  }
  if (groups <= 0 || xs[1] % groups != 0) {
    throw ValueError("group_norm: groups " + std::to_string(groups) +
                     " must divide channels " + std::to_string(xs[1]));
  }
  NodeAttrs attrs;
  attrs.groups = groups;
  attrs.eps = eps;
  return push(Op::kGroupNorm, {x, gamma, beta}, attrs, xs);
}

template <typename S>
int32_t TapeT<S>::layer_norm(int32_t x, int32_t gamma, int32_t beta, double eps) {
  check_id(x, "layer_norm");
  check_id(gamma, "layer_norm");
  check_id(beta, "layer_norm");
  const auto& xs = shape_of(x);
  const auto& gs = shape_of(gamma);
  const auto& bs = shape_of(beta);
  if (xs.empty() || gs.size() != 1 || bs.size() != 1 || gs[0] != xs.back() || bs[0] != xs.back()) {
    shape_fail("layer_norm", {xs, gs, bs}, "wants x [...,C], gamma [C], beta [C]");
  }
  NodeAttrs attrs;
  attrs.eps = eps;
  return push(Op::kLayerNorm, {x, gamma, beta}, attrs, xs);
}

template <typename S>
int32_t TapeT<S>::attention(int32_t q, int32_t k, int32_t v, int heads) {
  check_id(q, "attention");
  check_id(k, "attention");
  check_id(v, "attention");
  const auto& qs = shape_of(q);
  const auto& ks = shape_of(k);
  const auto& vs = shape_of(v);
  if (qs.size() != 3 || qs != ks || qs != vs) {
    shape_fail("attention", {qs, ks, vs}, "wants matching q,k,v [N,T,C]");
  }
  if (heads <= 0 || qs[2] % heads != 0) {
    throw ValueError("attention: heads " + std::to_string(heads) + " must divide width " +
                     std::to_string(qs[2]));
  }
  NodeAttrs attrs;
  attrs.heads = heads;
  return push(Op::kAttention, {q, k, v}, attrs, qs);
}

template <typename S>
int32_t TapeT<S>::silu(int32_t x) {
  check_id(x, "silu");
  return push(Op::kSilu, {x}, {}, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::gelu(int32_t x) {
  check_id(x, "gelu");
  return push(Op::kGelu, {x}, {}, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::tanh_(int32_t x) {
  check_id(x, "tanh");
  return push(Op::kTanh, {x}, {}, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::softmax(int32_t x) {
  check_id(x, "softmax");
  if (shape_of(x).empty()) shape_fail("softmax", {shape_of(x)}, "wants rank >= 1");
  return push(Op::kSoftmax, {x}, {}, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::log_sigmoid(int32_t x) {
  check_id(x, "log_sigmoid");
  return push(Op::kLogSigmoid, {x}, {}, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::add(int32_t a, int32_t b) {
  check_id(a, "add");
  check_id(b, "add");
  if (shape_of(a) != shape_of(b)) shape_fail("add", {shape_of(a), shape_of(b)}, "shape mismatch");
  return push(Op::kAdd, {a, b}, {}, shape_of(a));
}

template <typename S>
int32_t TapeT<S>::mul(int32_t a, int32_t b) {
  check_id(a, "mul");
  check_id(b, "mul");
  if (shape_of(a) != shape_of(b)) shape_fail("mul", {shape_of(a), shape_of(b)}, "shape mismatch");
  return push(Op::kMul, {a, b}, {}, shape_of(a));
}

template <typename S>
int32_t TapeT<S>::scale(int32_t x, double c) {
  check_id(x, "scale");
  NodeAttrs attrs;
  attrs.scalar = c;
  return push(Op::kScale, {x}, attrs, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::add_const(int32_t x, double c) {
  check_id(x, "add_const");
  NodeAttrs attrs;
  attrs.scalar = c;
  return push(Op::kAddConst, {x}, attrs, shape_of(x));
}

template <typename S>
int32_t TapeT<S>::add_rows_tokens(int32_t x, int32_t v) {
  check_id(x, "add_rows_tokens");
  check_id(v, "add_rows_tokens");
  const auto& xs = shape_of(x);
  const auto& vs = shape_of(v);
  if (xs.size() != 3 || vs.size() != 2 || vs[0] != xs[0] || vs[1] != xs[2]) {
    shape_fail("add_rows_tokens", {xs, vs}, "wants x [N,T,C], v [N,C]");
  }
  return push(Op::kAddRowsTokens, {x, v}, {}, xs);
}

template <typename S>
int32_t TapeT<S>::add_rows_spatial(int32_t x, int32_t v) {
  check_id(x, "add_rows_spatial");
  check_id(v, "add_rows_spatial");
  const auto& xs = shape_of(x);
  const auto& vs = shape_of(v);
  if (xs.size() != 4 || vs.size() != 2 || vs[0] != xs[0] || vs[1] != xs[1]) {
    shape_fail("add_rows_spatial", {xs, vs}, "wants x [N,C,H,W], v [N,C]");
  }
  return push(Op::kAddRowsSpatial, {x, v}, {}, xs);
}

template <typename S>
int32_t TapeT<S>::add_positional(int32_t x, int32_t p) {
  check_id(x, "add_positional");
  check_id(p, "add_positional");
  const auto& xs = shape_of(x);
  const auto& ps = shape_of(p);
  if (xs.size() != 3 || ps.size() != 2 || ps[0] != xs[1] || ps[1] != xs[2]) {
    shape_fail("add_positional", {xs, ps}, "wants x [N,T,C], p [T,C]");
  }
  return push(Op::kAddPositional, {x, p}, {}, xs);
}

template <typename S>
int32_t TapeT<S>::mse(int32_t a, int32_t b) {
  check_id(a, "mse");
  check_id(b, "mse");
  if (shape_of(a) != shape_of(b)) shape_fail("mse", {shape_of(a), shape_of(b)}, "shape mismatch");
  return push(Op::kMse, {a, b}, {}, {1});
}

template <typename S>
int32_t TapeT<S>::mse_per_sample(int32_t a, int32_t b) {
  check_id(a, "mse_per_sample");
  check_id(b, "mse_per_sample");
  const auto& as = shape_of(a);
  if (as != shape_of(b) || as.size() < 2) {
    shape_fail("mse_per_sample", {as, shape_of(b)}, "wants matching [N,...] tensors");
  }
  return push(Op::kMsePerSample, {a, b}, {}, {as[0]});
}

template <typename S>
int32_t TapeT<S>::mean_all(int32_t x) {
  check_id(x, "mean_all");
  return push(Op::kMeanAll, {x}, {}, {1});
}

template <typename S>
int32_t TapeT<S>::patchify(int32_t x, int patch) {
  check_id(x, "patchify");
  const auto& xs = shape_of(x);
  if (xs.size() != 4) shape_fail("patchify", {xs}, "wants [N,C,H,W]");
  if (patch <= 0 || xs[2] % patch != 0 || xs[3] % patch != 0) {
    throw ValueError("patchify: patch " + std::to_string(patch) + " must divide " +
                     Tensor::shape_str(xs));
  }
  NodeAttrs attrs;
  attrs.patch = patch;
  const int T = (xs[2] / patch) * (xs[3] / patch);
  return push(Op::kPatchify, {x}, attrs, {xs[0], T, xs[1] * patch * patch});
}

template <typename S>
int32_t TapeT<S>::unpatchify(int32_t x, int patch, int out_c, int out_h, int out_w) {
  check_id(x, "unpatchify");
  const auto& xs = shape_of(x);
  if (xs.size() != 3) shape_fail("unpatchify", {xs}, "wants [N,T,F]");
  if (patch <= 0 || out_c <= 0 || out_h % patch != 0 || out_w % patch != 0 ||
      xs[1] != (out_h / patch) * (out_w / patch) || xs[2] != out_c * patch * patch) {
    throw ValueError("unpatchify: tokens " + Tensor::shape_str(xs) + " do not tile [" +
                     std::to_string(out_c) + "," + std::to_string(out_h) + "," +
                     std::to_string(out_w) + "] with patch " + std::to_string(patch));
  }
  NodeAttrs attrs;
  attrs.patch = patch;
  attrs.out_c = out_c;
  attrs.out_h = out_h;
  attrs.out_w = out_w;
  return push(Op::kUnpatchify, {x}, attrs, {xs[0], out_c, out_h, out_w});
}

template <typename S>
int32_t TapeT<S>::concat_channels(int32_t a, int32_t b) {
  check_id(a, "concat_channels");
  check_id(b, "concat_channels");
  const auto& as = shape_of(a);
  const auto& bs = shape_of(b);
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
    shape_fail("concat_channels", {as, bs}, "wants [N,*,H,W] pairs agreeing off-channel");
  }
  return push(Op::kConcatChannels, {a, b}, {}, {as[0], as[1] + bs[1], as[2], as[3]});
}

template <typename S>
int32_t TapeT<S>::embedding(int32_t table, std::vector<int> indices) {
  check_id(table, "embedding");
  const auto& ts = shape_of(table);
  if (ts.size() != 2) shape_fail("embedding", {ts}, "wants table [V,C]");
  if (indices.empty()) throw ValueError("embedding: empty index list");
  for (int i : indices) {
    if (i < 0 || i >= ts[0]) {
      throw ValueError("embedding: index " + std::to_string(i) + " outside table rows " +
                       std::to_string(ts[0]));
    }
  }
  NodeAttrs attrs;
  const int n = static_cast<int>(indices.size());
  attrs.indices = std::move(indices);
  return push(Op::kEmbedding, {table}, attrs, {n, ts[1]});
}

template <typename S>
TraceT<S> TapeT<S>::finish(int32_t output_id) {
  check_id(output_id, "finish");
  trace_.output_id = output_id;
  return std::move(trace_);
}

// ---------------------------------------------------------------------------
// evaluate / replay
// ---------------------------------------------------------------------------

template <typename S>
EvalResultT<S> evaluate(const GraphFnT<S>& fn, std::vector<TensorT<S>> inputs,
                        std::vector<TensorT<S>> params) {
  TapeT<S> tape;
  std::vector<int32_t> in_ids, par_ids;
  in_ids.reserve(inputs.size());
  par_ids.reserve(params.size());
  for (auto& t : inputs) in_ids.push_back(tape.constant(std::move(t)));
  for (auto& t : params) par_ids.push_back(tape.param(std::move(t)));
  const int32_t out = fn(tape, in_ids, par_ids);
  EvalResultT<S> result;
  result.trace = tape.finish(out);
  result.output = result.trace.values[static_cast<size_t>(out)];
  return result;
}

template <typename S>
TensorT<S> replay_forward(TraceT<S>& trace) {
  if (trace.output_id < 0) throw ValueError("replay_forward: trace has no output");
  for (int32_t id = 0; id < static_cast<int32_t>(trace.nodes.size()); ++id) {
    compute_forward(trace, id);
  }
  return trace.values[static_cast<size_t>(trace.output_id)];
}

template struct TraceT<float>;
template struct TraceT<double>;
template class TapeT<float>;
template class TapeT<double>;
template void compute_forward<float>(TraceT<float>&, int32_t);
template void compute_forward<double>(TraceT<double>&, int32_t);
template EvalResultT<float> evaluate<float>(const GraphFnT<float>&, std::vector<Tensor>,
                                            std::vector<Tensor>);
template EvalResultT<double> evaluate<double>(const GraphFnT<double>&, std::vector<TensorD>,
                                              std::vector<TensorD>);
template TensorT<float> replay_forward<float>(TraceT<float>&);
template TensorT<double> replay_forward<double>(TraceT<double>&);

}  // namespace pixelpost
