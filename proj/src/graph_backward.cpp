// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>

#include "gemm.hpp"
#include "pixelpost/graph.hpp"

namespace pixelpost {

namespace {

void im2col_f(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
              int Wo, float* col) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* row = col + (static_cast<int64_t>((c * kh + ky) * kw + kx)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = 0.f;
            continue;
          }
          const float* xrow = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? 0.f : xrow[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, float* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* row = col + (static_cast<int64_t>((c * kh + ky) * kw + kx)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          float* xrow = dx + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) xrow[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::vector<Tensor> gradient(const Trace& tr, const Tensor& seed) {
  if (tr.output_id < 0) throw ValueError("gradient: trace has no output");
  const size_t count = tr.nodes.size();
  const Tensor& out_val = tr.values[static_cast<size_t>(tr.output_id)];
  if (seed.shape != out_val.shape) {
    throw ShapeError("gradient: seed " + Tensor::shape_str(seed.shape) +
                     " does not match output " + Tensor::shape_str(out_val.shape));
  }

  // Adjoint buffers, allocated lazily; an empty tensor means "no gradient has
  // reached this value yet".
  std::vector<Tensor> adj(count);
  auto grab = [&](int32_t id) -> Tensor& {
    Tensor& a = adj[static_cast<size_t>(id)];
    if (a.data.empty()) a = Tensor::zeros(tr.values[static_cast<size_t>(id)].shape);
    return a;
  };
  auto wants = [&](int32_t id) {
    return tr.nodes[static_cast<size_t>(id)].needs_grad;
  };

  adj[static_cast<size_t>(tr.output_id)] = seed;

  for (int32_t id = static_cast<int32_t>(count) - 1; id >= 0; --id) {
    const NodeT<float>& node = tr.nodes[static_cast<size_t>(id)];
    if (!node.needs_grad || adj[static_cast<size_t>(id)].data.empty()) continue;
    const Tensor& dy = adj[static_cast<size_t>(id)];
    auto in_val = [&](int i) -> const Tensor& {
      return tr.values[static_cast<size_t>(node.in[static_cast<size_t>(i)])];
    };
    auto in_id = [&](int i) { return node.in[static_cast<size_t>(i)]; };

    switch (node.op) {
      case Op::kConstant:
      case Op::kParam:
        break;

      case Op::kDense: {
        const Tensor& x = in_val(0);
        const Tensor& w = in_val(1);
        const int K = w.shape[0], M = w.shape[1];
        const int R = static_cast<int>(x.numel() / K);
        ECMap<float> X(x.data.data(), R, K);
        ECMap<float> W(w.data.data(), K, M);
        ECMap<float> dY(dy.data.data(), R, M);
        if (wants(in_id(0))) {
          EMap<float> dX(grab(in_id(0)).data.data(), R, K);
          dX.noalias() += dY * W.transpose();
        }
        if (wants(in_id(1))) {
          EMap<float> dW(grab(in_id(1)).data.data(), K, M);
          dW.noalias() += X.transpose() * dY;
        }
        if (wants(in_id(2))) {
          EVecMap<float> db(grab(in_id(2)).data.data(), M);
          db += dY.colwise().sum().transpose();
        }
        break;
      }

      case Op::kConv2d: {
        const Tensor& x = in_val(0);
        const Tensor& w = in_val(1);
        const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int F = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const auto& ys = tr.values[static_cast<size_t>(id)].shape;
        const int Ho = ys[2], Wo = ys[3];
        const int ck2 = C * kh * kw, hw = Ho * Wo;
        const bool want_x = wants(in_id(0)), want_w = wants(in_id(1)),
                   want_b = wants(in_id(2));
        std::vector<float> col(want_w || want_x ? static_cast<size_t>(ck2) * hw : 0);
        ECMap<float> Wm(w.data.data(), F, ck2);
        for (int n = 0; n < N; ++n) {
          ECMap<float> dYn(dy.data.data() + static_cast<int64_t>(n) * F * hw, F, hw);
          if (want_w) {
            // im2col is recomputed rather than saved: the buffers are large and
            // the copy is cheap next to the GEMMs on either side of it.
            im2col_f(x.data.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw,
                     node.attrs.stride, node.attrs.pad, Ho, Wo, col.data());
            EMap<float> dW(grab(in_id(1)).data.data(), F, ck2);
            dW.noalias() += dYn * ECMap<float>(col.data(), ck2, hw).transpose();
          }
          if (want_x) {
            EMap<float> dcol(col.data(), ck2, hw);
            dcol.noalias() = Wm.transpose() * dYn;
            col2im_add(col.data(), C, H, W, kh, kw, node.attrs.stride, node.attrs.pad, Ho, Wo,
                       grab(in_id(0)).data.data() + static_cast<int64_t>(n) * C * H * W);
          }
          if (want_b) {
            EVecMap<float> db(grab(in_id(2)).data.data(), F);
            db += dYn.rowwise().sum();
          }
        }
        break;
      }

      case Op::kUpsampleNearest2x: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        for (int nc = 0; nc < N * C; ++nc) {
          const float* dyp = dy.data.data() + static_cast<int64_t>(nc) * 4 * H * W;
          float* dxp = dx.data.data() + static_cast<int64_t>(nc) * H * W;
          for (int y = 0; y < H; ++y) {
            for (int x2 = 0; x2 < W; ++x2) {
              const float* s = dyp + (2 * y) * (2 * W) + 2 * x2;
              dxp[y * W + x2] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
            }
          }
        }
        break;
      }

      case Op::kGroupNorm: {
        const Tensor& x = in_val(0);
        const Tensor& gamma = in_val(1);
        const Tensor& mean = node.saved[0];
        const Tensor& rstd = node.saved[1];
        const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int G = node.attrs.groups, Cg = C / G, hw = H * W;
        const int64_t M = static_cast<int64_t>(Cg) * hw;
        const bool want_x = wants(in_id(0)), want_g = wants(in_id(1)),
                   want_b = wants(in_id(2));
        for (int n = 0; n < N; ++n) {
          for (int g = 0; g < G; ++g) {
            const float m = mean[n * G + g], rs = rstd[n * G + g];
            const int64_t base = (static_cast<int64_t>(n) * C + g * Cg) * hw;
            const float* xp = x.data.data() + base;
            const float* dyp = dy.data.data() + base;
            if (want_g || want_b) {
              for (int cg = 0; cg < Cg; ++cg) {
                const int c = g * Cg + cg;
                double sg = 0.0, sb = 0.0;
                for (int i = 0; i < hw; ++i) {
                  const float d = dyp[cg * hw + i];
                  sg += static_cast<double>(d) * ((xp[cg * hw + i] - m) * rs);
                  sb += static_cast<double>(d);
                }
                if (want_g) grab(in_id(1))[c] += static_cast<float>(sg);
                if (want_b) grab(in_id(2))[c] += static_cast<float>(sb);
              }
            }
            if (want_x) {
              double s1 = 0.0, s2 = 0.0;  // mean(gamma*dy), mean(gamma*dy*xhat)
              for (int cg = 0; cg < Cg; ++cg) {
                const double ga = gamma[g * Cg + cg];
                for (int i = 0; i < hw; ++i) {
                  const double d = ga * dyp[cg * hw + i];
                  s1 += d;
                  s2 += d * ((static_cast<double>(xp[cg * hw + i]) - m) * rs);
                }
              }
              const double m1 = s1 / static_cast<double>(M);
              const double m2 = s2 / static_cast<double>(M);
              float* dxp = grab(in_id(0)).data.data() + base;
              // As in layer_norm: the cancellation-prone combination is done in
              // double per group and rounded once.
              for (int cg = 0; cg < Cg; ++cg) {
                const double ga = gamma[g * Cg + cg];
                for (int i = 0; i < hw; ++i) {
                  const double xhat = (static_cast<double>(xp[cg * hw + i]) - m) * rs;
                  const double d = ga * dyp[cg * hw + i];
                  dxp[cg * hw + i] += static_cast<float>(rs * (d - m1 - xhat * m2));
                }
              }
            }
          }
        }
        break;
      }

      case Op::kLayerNorm: {
        const Tensor& x = in_val(0);
        const Tensor& gamma = in_val(1);
        const Tensor& mean = node.saved[0];
        const Tensor& rstd = node.saved[1];
        const int C = x.shape.back();
        const int64_t rows = x.numel() / C;
        const bool want_x = wants(in_id(0)), want_g = wants(in_id(1)),
                   want_b = wants(in_id(2));
        for (int64_t r = 0; r < rows; ++r) {
          const float m = mean[r], rs = rstd[r];
          const float* xp = x.data.data() + r * C;
          const float* dyp = dy.data.data() + r * C;
          if (want_g || want_b) {
            for (int c = 0; c < C; ++c) {
              const float xhat = (xp[c] - m) * rs;
              if (want_g) grab(in_id(1))[c] += dyp[c] * xhat;
              if (want_b) grab(in_id(2))[c] += dyp[c];
            }
          }
          if (want_x) {
            double s1 = 0.0, s2 = 0.0;
            for (int c = 0; c < C; ++c) {
              const double d = static_cast<double>(gamma[c]) * dyp[c];
              s1 += d;
              s2 += d * ((static_cast<double>(xp[c]) - m) * rs);
            }
            const double m1 = s1 / C;
            const double m2 = s2 / C;
            float* dxp = grab(in_id(0)).data.data() + r * C;
            // The three terms largely cancel when the row is nearly constant,
            // so combine them in double and round once at the end.
            for (int c = 0; c < C; ++c) {
              const double xhat = (static_cast<double>(xp[c]) - m) * rs;
              const double d = static_cast<double>(gamma[c]) * dyp[c];
              dxp[c] += static_cast<float>(rs * (d - m1 - xhat * m2));
            }
          }
        }
        break;
      }

      case Op::kAttention: {
        const Tensor& q = in_val(0);
        const Tensor& k = in_val(1);
        const Tensor& v = in_val(2);
        const Tensor& probs = node.saved[0];
        const int N = q.shape[0], T = q.shape[1], C = q.shape[2];
        const int Hn = node.attrs.heads, Dh = C / Hn;
        const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(Dh)));
        const bool want_q = wants(in_id(0)), want_k = wants(in_id(1)),
                   want_v = wants(in_id(2));
        std::vector<float> Qb(static_cast<size_t>(T) * Dh), Kb(Qb.size()), Vb(Qb.size()),
            dOb(Qb.size()), dS(static_cast<size_t>(T) * T), dPbuf(dS.size()),
            scratch(Qb.size());
        for (int n = 0; n < N; ++n) {
          for (int h = 0; h < Hn; ++h) {
            for (int t = 0; t < T; ++t) {
              const int64_t src = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
              std::memcpy(Qb.data() + static_cast<int64_t>(t) * Dh, q.data.data() + src,
                          sizeof(float) * Dh);
              std::memcpy(Kb.data() + static_cast<int64_t>(t) * Dh, k.data.data() + src,
                          sizeof(float) * Dh);
              std::memcpy(Vb.data() + static_cast<int64_t>(t) * Dh, v.data.data() + src,
                          sizeof(float) * Dh);
              std::memcpy(dOb.data() + static_cast<int64_t>(t) * Dh, dy.data.data() + src,
                          sizeof(float) * Dh);
            }
            ECMap<float> P(probs.data.data() + (static_cast<int64_t>(n) * Hn + h) * T * T, T, T);
            ECMap<float> dO(dOb.data(), T, Dh);
            if (want_v) {
              EMap<float> dV(scratch.data(), T, Dh);
              dV.noalias() = P.transpose() * dO;
              for (int t = 0; t < T; ++t) {
                const int64_t dst = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
                float* acc = grab(in_id(2)).data.data() + dst;
                for (int d = 0; d < Dh; ++d) acc[d] += scratch[t * Dh + d];
              }
            }
            if (want_q || want_k) {
              EMap<float> dP(dPbuf.data(), T, T);
              dP.noalias() = dO * ECMap<float>(Vb.data(), T, Dh).transpose();
              // dS = P * (dP - rowsum(dP . P)), the softmax Jacobian per row.
              for (int r = 0; r < T; ++r) {
                double rowdot = 0.0;
                for (int c = 0; c < T; ++c) {
                  rowdot += static_cast<double>(dPbuf[r * T + c]) * P(r, c);
                }
                for (int c = 0; c < T; ++c) {
                  dS[r * T + c] =
                      P(r, c) * (dPbuf[r * T + c] - static_cast<float>(rowdot)) * scale;
                }
              }
              ECMap<float> dSm(dS.data(), T, T);
              if (want_q) {
                EMap<float> dQ(scratch.data(), T, Dh);
                dQ.noalias() = dSm * ECMap<float>(Kb.data(), T, Dh);
                for (int t = 0; t < T; ++t) {
                  const int64_t dst = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
                  float* acc = grab(in_id(0)).data.data() + dst;
                  for (int d = 0; d < Dh; ++d) acc[d] += scratch[t * Dh + d];
                }
              }
              if (want_k) {
                EMap<float> dK(scratch.data(), T, Dh);
                dK.noalias() = dSm.transpose() * ECMap<float>(Qb.data(), T, Dh);
                for (int t = 0; t < T; ++t) {
                  const int64_t dst = (static_cast<int64_t>(n) * T + t) * C + h * Dh;
                  float* acc = grab(in_id(1)).data.data() + dst;
                  for (int d = 0; d < Dh; ++d) acc[d] += scratch[t * Dh + d];
                }
              }
            }
          }
        }
        break;
      }

      case Op::kSilu: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        for (int64_t i = 0; i < x.numel(); ++i) {
          const float s = 1.f / (1.f + std::exp(-x[i]));
          dx[i] += dy[i] * s * (1.f + x[i] * (1.f - s));
        }
        break;
      }

      case Op::kGelu: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        const float inv_sqrt2 = 0.70710678f;
        const float inv_sqrt2pi = 0.3989422804014327f;
        for (int64_t i = 0; i < x.numel(); ++i) {
          const float cdf = 0.5f * (1.f + std::erf(x[i] * inv_sqrt2));
          const float pdf = inv_sqrt2pi * std::exp(-0.5f * x[i] * x[i]);
          dx[i] += dy[i] * (cdf + x[i] * pdf);
        }
        break;
      }

      case Op::kTanh: {
        if (!wants(in_id(0))) break;
        const Tensor& y = tr.values[static_cast<size_t>(id)];
        Tensor& dx = grab(in_id(0));
        for (int64_t i = 0; i < y.numel(); ++i) dx[i] += dy[i] * (1.f - y[i] * y[i]);
        break;
      }

      case Op::kSoftmax: {
        if (!wants(in_id(0))) break;
        const Tensor& y = tr.values[static_cast<size_t>(id)];
        Tensor& dx = grab(in_id(0));
        const int C = y.shape.back();
        const int64_t rows = y.numel() / C;
        for (int64_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) {
            dot += static_cast<double>(dy[r * C + c]) * y[r * C + c];
          }
          for (int c = 0; c < C; ++c) {
            dx[r * C + c] += y[r * C + c] * (dy[r * C + c] - static_cast<float>(dot));
          }
        }
        break;
      }

      case Op::kLogSigmoid: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        for (int64_t i = 0; i < x.numel(); ++i) {
          dx[i] += dy[i] / (1.f + std::exp(x[i]));  // sigmoid(-x)
        }
        break;
      }

      case Op::kAdd: {
        for (int s = 0; s < 2; ++s) {
          if (!wants(in_id(s))) continue;
          Tensor& d = grab(in_id(s));
          for (int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
        }
        break;
      }

      case Op::kMul: {
        for (int s = 0; s < 2; ++s) {
          if (!wants(in_id(s))) continue;
          const Tensor& other = in_val(1 - s);
          Tensor& d = grab(in_id(s));
          for (int64_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * other[i];
        }
        break;
      }

      case Op::kScale: {
        if (!wants(in_id(0))) break;
        Tensor& dx = grab(in_id(0));
        const float c = static_cast<float>(node.attrs.scalar);
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * c;
        break;
      }

      case Op::kAddConst: {
        if (!wants(in_id(0))) break;
        Tensor& dx = grab(in_id(0));
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        break;
      }

      case Op::kAddRowsTokens: {
        const Tensor& x = in_val(0);
        const int N = x.shape[0], T = x.shape[1], C = x.shape[2];
        if (wants(in_id(0))) {
          Tensor& dx = grab(in_id(0));
          for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (wants(in_id(1))) {
          Tensor& dv = grab(in_id(1));
          for (int n = 0; n < N; ++n) {
            for (int t = 0; t < T; ++t) {
              const int64_t base = (static_cast<int64_t>(n) * T + t) * C;
              for (int c = 0; c < C; ++c) dv[static_cast<int64_t>(n) * C + c] += dy[base + c];
            }
          }
        }
        break;
      }

      case Op::kAddRowsSpatial: {
        const Tensor& x = in_val(0);
        const int N = x.shape[0], C = x.shape[1];
        const int hw = x.shape[2] * x.shape[3];
        if (wants(in_id(0))) {
          Tensor& dx = grab(in_id(0));
          for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (wants(in_id(1))) {
          Tensor& dv = grab(in_id(1));
          for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
              const int64_t base = (static_cast<int64_t>(n) * C + c) * hw;
              double acc = 0.0;
              for (int i = 0; i < hw; ++i) acc += static_cast<double>(dy[base + i]);
              dv[static_cast<int64_t>(n) * C + c] += static_cast<float>(acc);
            }
          }
        }
        break;
      }

      case Op::kAddPositional: {
        const Tensor& x = in_val(0);
        const int N = x.shape[0];
        const int64_t tc = static_cast<int64_t>(x.shape[1]) * x.shape[2];
        if (wants(in_id(0))) {
          Tensor& dx = grab(in_id(0));
          for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (wants(in_id(1))) {
          Tensor& dp = grab(in_id(1));
          for (int n = 0; n < N; ++n) {
            const int64_t base = static_cast<int64_t>(n) * tc;
            for (int64_t i = 0; i < tc; ++i) dp[i] += dy[base + i];
          }
        }
        break;
      }

      case Op::kMse: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const float c = 2.f * dy[0] / static_cast<float>(a.numel());
        if (wants(in_id(0))) {
          Tensor& da = grab(in_id(0));
          for (int64_t i = 0; i < a.numel(); ++i) da[i] += c * (a[i] - b[i]);
        }
        if (wants(in_id(1))) {
          Tensor& db = grab(in_id(1));
          for (int64_t i = 0; i < a.numel(); ++i) db[i] -= c * (a[i] - b[i]);
        }
        break;
      }

      case Op::kMsePerSample: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const int N = a.shape[0];
        const int64_t row = a.numel() / N;
        for (int n = 0; n < N; ++n) {
          const float c = 2.f * dy[n] / static_cast<float>(row);
          const int64_t base = n * row;
          if (wants(in_id(0))) {
            Tensor& da = grab(in_id(0));
            for (int64_t i = 0; i < row; ++i) da[base + i] += c * (a[base + i] - b[base + i]);
          }
          if (wants(in_id(1))) {
            Tensor& db = grab(in_id(1));
            for (int64_t i = 0; i < row; ++i) db[base + i] -= c * (a[base + i] - b[base + i]);
          }
        }
        break;
      }

      case Op::kMeanAll: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        const float c = dy[0] / static_cast<float>(x.numel());
        for (int64_t i = 0; i < x.numel(); ++i) dx[i] += c;
        break;
      }

      case Op::kPatchify: {
        if (!wants(in_id(0))) break;
        const Tensor& x = in_val(0);
        Tensor& dx = grab(in_id(0));
        const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int p = node.attrs.patch, Hp = H / p, Wp = W / p;
        const int fdim = C * p * p;
        for (int n = 0; n < N; ++n) {
          for (int gy = 0; gy < Hp; ++gy) {
            for (int gx = 0; gx < Wp; ++gx) {
              const int t = gy * Wp + gx;
              const float* src = dy.data.data() + (static_cast<int64_t>(n) * Hp * Wp + t) * fdim;
              for (int c = 0; c < C; ++c) {
                for (int py = 0; py < p; ++py) {
                  float* dst = dx.data.data() +
                               ((static_cast<int64_t>(n) * C + c) * H + gy * p + py) * W + gx * p;
                  const float* s = src + (static_cast<int64_t>(c) * p + py) * p;
                  for (int px = 0; px < p; ++px) dst[px] += s[px];
                }
              }
            }
          }
        }
        break;
      }

      case Op::kUnpatchify: {
        if (!wants(in_id(0))) break;
        Tensor& dx = grab(in_id(0));
        const int N = dx.shape[0];
        const int C = node.attrs.out_c, H = node.attrs.out_h, W = node.attrs.out_w;
        const int p = node.attrs.patch, Hp = H / p, Wp = W / p;
        const int fdim = C * p * p;
        for (int n = 0; n < N; ++n) {
          for (int gy = 0; gy < Hp; ++gy) {
            for (int gx = 0; gx < Wp; ++gx) {
              const int t = gy * Wp + gx;
              float* dst = dx.data.data() + (static_cast<int64_t>(n) * Hp * Wp + t) * fdim;
              for (int c = 0; c < C; ++c) {
                for (int py = 0; py < p; ++py) {
                  const float* src = dy.data.data() +
                                     ((static_cast<int64_t>(n) * C + c) * H + gy * p + py) * W +
                                     gx * p;
                  float* d = dst + (static_cast<int64_t>(c) * p + py) * p;
                  for (int px = 0; px < p; ++px) d[px] += src[px];
                }
              }
            }
          }
        }
        break;
      }

      case Op::kConcatChannels: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
        const int64_t hw = static_cast<int64_t>(a.shape[2]) * a.shape[3];
        if (wants(in_id(0))) {
          Tensor& da = grab(in_id(0));
          for (int n = 0; n < N; ++n) {
            const float* src = dy.data.data() + static_cast<int64_t>(n) * (Ca + Cb) * hw;
            float* dst = da.data.data() + static_cast<int64_t>(n) * Ca * hw;
            for (int64_t i = 0; i < Ca * hw; ++i) dst[i] += src[i];
          }
        }
        if (wants(in_id(1))) {
          Tensor& db = grab(in_id(1));
          for (int n = 0; n < N; ++n) {
            const float* src = dy.data.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * hw;
            float* dst = db.data.data() + static_cast<int64_t>(n) * Cb * hw;
            for (int64_t i = 0; i < Cb * hw; ++i) dst[i] += src[i];
          }
        }
        break;
      }

      case Op::kEmbedding: {
        if (!wants(in_id(0))) break;
        Tensor& dt = grab(in_id(0));
        const int C = dt.shape[1];
        const auto& idx = node.attrs.indices;
        for (size_t n = 0; n < idx.size(); ++n) {
          float* dst = dt.data.data() + static_cast<int64_t>(idx[n]) * C;
          const float* src = dy.data.data() + static_cast<int64_t>(n) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
        break;
      }
    }
  }

  std::vector<Tensor> grads;
  grads.reserve(tr.param_ids.size());
  for (int32_t pid : tr.param_ids) {
    Tensor& g = adj[static_cast<size_t>(pid)];
    if (g.data.empty()) g = Tensor::zeros(tr.values[static_cast<size_t>(pid)].shape);
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace pixelpost
