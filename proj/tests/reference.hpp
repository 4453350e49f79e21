#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "leafseq/nn.hpp"

// Plain-loop forward pass of one decoder step, written against raw value
// arrays so it shares no code with the tensor library.
namespace leafseq::reference {

using Vec = std::vector<double>;

inline Vec values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// x (n) times row-major W (n x m).
inline Vec vecmat(const Vec& x, const Tensor& W) {
  const std::size_t n = W.dim(0);
  const std::size_t m = W.dim(1);
  const auto w = W.values();
  Vec out(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j] += x[i] * w[i * m + j];
  }
  return out;
}

inline double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Vec softmax(const Vec& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  Vec out(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += out[i] = std::exp(z[i] - mx);
  for (auto& o : out) o /= s;
  return out;
}

struct Cell {
  Vec h;
  Vec c;
};

inline Cell lstm(const Vec& x, const Cell& prev, const LstmParams& p) {
  const std::size_t h = p.hidden_size();
  Vec z = vecmat(x, p.W);
  const Vec u = vecmat(prev.h, p.U);
  const auto b = p.b.values();
  for (std::size_t k = 0; k < 4 * h; ++k) z[k] += u[k] + b[k];
  Cell out{Vec(h), Vec(h)};
  for (std::size_t k = 0; k < h; ++k) {
    const double i = sigm(z[k]);
    const double f = sigm(z[h + k]);
    const double o = sigm(z[2 * h + k]);
    const double g = std::tanh(z[3 * h + k]);
    out.c[k] = f * prev.c[k] + i * g;
    out.h[k] = o * std::tanh(out.c[k]);
  }
  return out;
}

struct Step {
  Vec p_final;
  Vec alpha;
  double p_gen = 0.0;
  Cell cell;
};

// H is T x 2h row-major; cov empty when coverage is off.
inline Step pointer_step(const Vec& x, const Cell& prev, const Vec& cov, const Tensor& H,
                         const std::vector<std::int64_t>& src_ext, std::size_t oov_count, const DecoderParams& p,
                         const OutputLayer& out, AttentionMode mode) {
  Step r;
  r.cell = lstm(x, prev, p.cell);
  const Vec& s = r.cell.h;
  const std::size_t T = H.dim(0);
  const std::size_t w = H.dim(1);
  const auto hv = H.values();
  Vec e(T, 0.0);
  if (mode == AttentionMode::additive) {
    const Vec ss = vecmat(s, p.attention.W_s);
    const auto b = p.attention.b.values();
    const auto v = p.attention.v.values();
    const auto wc = p.attention.w_c.values();
    for (std::size_t t = 0; t < T; ++t) {
      const Vec row(hv.begin() + t * w, hv.begin() + (t + 1) * w);
      const Vec k = vecmat(row, p.attention.W_h);
      for (std::size_t j = 0; j < k.size(); ++j) {
        const double c = cov.empty() ? 0.0 : cov[t] * wc[j];
        e[t] += v[j] * std::tanh(k[j] + ss[j] + c + b[j]);
      }
    }
  } else {
    const Vec q = vecmat(s, p.attention.W_a);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < w; ++j) e[t] += hv[t * w + j] * q[j];
    }
  }
  r.alpha = softmax(e);
  Vec ctx(w, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < w; ++j) ctx[j] += r.alpha[t] * hv[t * w + j];
  }
  Vec q = s;
  q.insert(q.end(), ctx.begin(), ctx.end());
  Vec proj = vecmat(q, out.W_proj);
  const auto bp = out.b_proj.values();
  for (std::size_t j = 0; j < proj.size(); ++j) proj[j] += bp[j];
  const std::size_t V = out.E.dim(0);
  const std::size_t d = out.E.dim(1);
  const auto ev = out.E.values();
  Vec logits(V, 0.0);
  for (std::size_t i = 0; i < V; ++i) {
    for (std::size_t j = 0; j < d; ++j) logits[i] += ev[i * d + j] * proj[j];
  }
  const Vec pv = softmax(logits);
  double zg = p.pointer.b.item();
  zg += vecmat(ctx, p.pointer.w_c)[0] + vecmat(s, p.pointer.w_s)[0] + vecmat(x, p.pointer.w_x)[0];
  r.p_gen = sigm(zg);
  r.p_final.assign(V + oov_count, 0.0);
  for (std::size_t i = 0; i < V; ++i) r.p_final[i] = r.p_gen * pv[i];
  for (std::size_t t = 0; t < T; ++t) r.p_final[static_cast<std::size_t>(src_ext[t])] += (1.0 - r.p_gen) * r.alpha[t];
  return r;
}

}  // namespace leafseq::reference
