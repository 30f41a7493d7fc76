#include "m1lab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <cblas.h>

#include "m1lab/error.hpp"

namespace m1lab {

namespace {

blasint blas_int(std::size_t v) {
  if (v > static_cast<std::size_t>(std::numeric_limits<blasint>::max())) fail(ErrorKind::kDimension, "matrix too large for BLAS");
  return static_cast<blasint>(v);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::kDimension, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                    " differ");
  }
}

void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::kNumeric, std::string(op) + ": non-finite input");
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a, blas_int(k), b,
              blas_int(n), 1.0, c, blas_int(n));
}

// c[m,k] += a[m,n] * b[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(k), blas_int(n), 1.0, a, blas_int(n), b,
              blas_int(n), 1.0, c, blas_int(k));
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k), blas_int(n), blas_int(m), 1.0, a, blas_int(k), b,
              blas_int(n), 1.0, c, blas_int(n));
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](std::span<const double> g, std::span<const std::span<double>> in) {
    for (auto dst : in) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [ad, bd](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i] * bd[i];
                   for (std::size_t i = 0; i < in[1].size(); ++i) in[1][i] += g[i] * ad[i];
                 });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op("scale", a.shape(), std::move(out), {a},
                 [factor](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += factor * g[i];
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {1}, {s}, {a}, [](std::span<const double> g, std::span<const std::span<double>> in) {
    for (auto& v : in[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorKind::kDimension, "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {a},
                 [](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t i = 0; i < in[0].size(); ++i) in[0][i] += g[i];
                 });
}

Tensor silu(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sigmoid(ad[i]);
  return make_op("silu", a.shape(), std::move(out), {a}, [ad](std::span<const double> g, std::span<const std::span<double>> in) {
    for (std::size_t i = 0; i < in[0].size(); ++i) {
      const double s = sigmoid(ad[i]);
      in[0][i] += g[i] * s * (1.0 + ad[i] * (1.0 - s));
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::kDimension, "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  gemm_nn(ad.data(), bd.data(), out.data(), m, k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [ad, bd, m, k, n](std::span<const double> g, std::span<const std::span<double>> in) {
                   if (!in[0].empty()) gemm_nt(g.data(), bd.data(), in[0].data(), m, n, k);
                   if (!in[1].empty()) gemm_tn(ad.data(), g.data(), in[1].data(), m, k, n);
                 });
}

Tensor softmax(const Tensor& x) {
  auto xd = x.data();
  require_finite(xd, "softmax");
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xd.data() + r * n;
    double* dst = out.data() + r * n;
    const double mx = *std::max_element(src, src + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (dst[j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < n; ++j) dst[j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [y, n, rows](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* yr = y->data() + r * n;
                     const double* gr = g.data() + r * n;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                     for (std::size_t j = 0; j < n; ++j) in[0][r * n + j] += yr[j] * (gr[j] - dot);
                   }
                 });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  const std::size_t d = last_dim(x);
  if (gain.ndim() != 1 || gain.dim(0) != d) {
    fail(ErrorKind::kDimension, "rmsnorm: gain " + shape_str(gain.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (!(eps >= 0.0)) fail(ErrorKind::kParameter, "rmsnorm: eps must be nonnegative");
  auto xd = x.data();
  auto gd = gain.data();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(xd.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms = ms / static_cast<double>(d) + eps;
    if (!(ms > 0.0)) fail(ErrorKind::kNumeric, "rmsnorm: zero mean square with eps = 0");
    const double ir = 1.0 / std::sqrt(ms);
    (*inv)[r] = ir;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gd[j] * xr[j] * ir;
  }
  return make_op("rmsnorm", x.shape(), std::move(out), {x, gain},
                 [xd, gd, inv, d, rows](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* xr = xd.data() + r * d;
                     const double* gr = g.data() + r * d;
                     const double ir = (*inv)[r];
                     if (!in[1].empty()) {
                       for (std::size_t j = 0; j < d; ++j) in[1][j] += gr[j] * xr[j] * ir;
                     }
                     if (!in[0].empty()) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < d; ++j) dot += gd[j] * gr[j] * xr[j];
                       const double c = dot * ir * ir * ir / static_cast<double>(d);
                       for (std::size_t j = 0; j < d; ++j) in[0][r * d + j] += ir * gd[j] * gr[j] - c * xr[j];
                     }
                   }
                 });
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down) {
  const std::size_t d = last_dim(x);
  if (w_gate.ndim() != 2 || w_gate.dim(0) != d || w_up.shape() != w_gate.shape() || w_down.ndim() != 2 ||
      w_down.dim(0) != w_gate.dim(1) || w_down.dim(1) != d) {
    fail(ErrorKind::kDimension, "swiglu_ffn: input " + shape_str(x.shape()) + " with w_gate " + shape_str(w_gate.shape()) +
                                    ", w_up " + shape_str(w_up.shape()) + ", w_down " + shape_str(w_down.shape()));
  }
  const std::size_t h = w_gate.dim(1);
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto wg = w_gate.data();
  auto wu = w_up.data();
  auto wd = w_down.data();

  auto gate = std::make_shared<std::vector<double>>(rows * h, 0.0);
  auto up = std::make_shared<std::vector<double>>(rows * h, 0.0);
  gemm_nn(xd.data(), wg.data(), gate->data(), rows, d, h);
  gemm_nn(xd.data(), wu.data(), up->data(), rows, d, h);
  auto hidden = std::make_shared<std::vector<double>>(rows * h);
  for (std::size_t i = 0; i < hidden->size(); ++i) (*hidden)[i] = (*gate)[i] * sigmoid((*gate)[i]) * (*up)[i];
  std::vector<double> out(rows * d, 0.0);
  gemm_nn(hidden->data(), wd.data(), out.data(), rows, h, d);

  return make_op(
      "swiglu_ffn", x.shape(), std::move(out), {x, w_gate, w_up, w_down},
      [xd, wg, wu, wd, gate, up, hidden, rows, d, h](std::span<const double> g, std::span<const std::span<double>> in) {
        if (!in[3].empty()) gemm_tn(hidden->data(), g.data(), in[3].data(), rows, h, d);
        std::vector<double> dh(rows * h, 0.0);
        gemm_nt(g.data(), wd.data(), dh.data(), rows, d, h);
        std::vector<double> dgate(rows * h), dup(rows * h);
        for (std::size_t i = 0; i < dh.size(); ++i) {
          const double a = (*gate)[i];
          const double s = sigmoid(a);
          dup[i] = dh[i] * a * s;
          dgate[i] = dh[i] * (*up)[i] * s * (1.0 + a * (1.0 - s));
        }
        if (!in[1].empty()) gemm_tn(xd.data(), dgate.data(), in[1].data(), rows, d, h);
        if (!in[2].empty()) gemm_tn(xd.data(), dup.data(), in[2].data(), rows, d, h);
        if (!in[0].empty()) {
          gemm_nt(dgate.data(), wg.data(), in[0].data(), rows, h, d);
          gemm_nt(dup.data(), wu.data(), in[0].data(), rows, h, d);
        }
      });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, std::span<const std::uint16_t> sample_ids) {
  if (kernel.ndim() != 2) fail(ErrorKind::kParameter, "causal_conv1d: kernel must be [k, d], got " + shape_str(kernel.shape()));
  const std::size_t t = x.dim(0);
  const std::size_t d = x.numel() / t;
  const std::size_t k = kernel.dim(0);
  if (kernel.dim(1) != d) {
    fail(ErrorKind::kDimension, "causal_conv1d: kernel " + shape_str(kernel.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (!sample_ids.empty() && sample_ids.size() != t) {
    fail(ErrorKind::kDimension, "causal_conv1d: sample_ids length differs from sequence length");
  }
  auto xd = x.data();
  auto kd = kernel.data();
  std::vector<std::uint16_t> ids(sample_ids.begin(), sample_ids.end());
  auto tap_ok = [ids](std::size_t i, std::ptrdiff_t src) {
    return src >= 0 && (ids.empty() || ids[static_cast<std::size_t>(src)] == ids[i]);
  };
  std::vector<double> out(t * d, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    double* yr = out.data() + i * d;
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + j) - static_cast<std::ptrdiff_t>(k - 1);
      if (!tap_ok(i, src)) continue;
      const double* xr = xd.data() + static_cast<std::size_t>(src) * d;
      const double* kr = kd.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) yr[c] += kr[c] * xr[c];
    }
  }
  return make_op("causal_conv1d", x.shape(), std::move(out), {x, kernel},
                 [xd, kd, tap_ok, t, d, k](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t i = 0; i < t; ++i) {
                     const double* gr = g.data() + i * d;
                     for (std::size_t j = 0; j < k; ++j) {
                       const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + j) - static_cast<std::ptrdiff_t>(k - 1);
                       if (!tap_ok(i, src)) continue;
                       const std::size_t s = static_cast<std::size_t>(src);
                       if (!in[0].empty()) {
                         for (std::size_t c = 0; c < d; ++c) in[0][s * d + c] += kd[j * d + c] * gr[c];
                       }
                       if (!in[1].empty()) {
                         for (std::size_t c = 0; c < d; ++c) in[1][j * d + c] += xd[s * d + c] * gr[c];
                       }
                     }
                   }
                 });
}

Tensor rope_apply(const Tensor& x, double base, std::size_t position_offset) {
  std::vector<std::size_t> positions(x.ndim() == 3 ? x.dim(0) : 0);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i + position_offset;
  return rope_apply(x, base, positions);
}

Tensor rope_apply(const Tensor& x, double base, std::span<const std::size_t> positions) {
  if (x.ndim() != 3) fail(ErrorKind::kDimension, "rope_apply: expected [t, heads, head_dim], got " + shape_str(x.shape()));
  const std::size_t t = x.dim(0), heads = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) fail(ErrorKind::kParameter, "rope_apply: head_dim " + std::to_string(hd) + " is odd");
  if (!(base > 0.0)) fail(ErrorKind::kParameter, "rope_apply: base must be positive");
  if (positions.size() != t) fail(ErrorKind::kDimension, "rope_apply: one position per row required");
  const std::size_t half = hd / 2;
  auto cs = std::make_shared<std::vector<double>>(t * half * 2);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[r]) * theta;
      (*cs)[(r * half + i) * 2] = std::cos(angle);
      (*cs)[(r * half + i) * 2 + 1] = std::sin(angle);
    }
  }
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (r * heads + h) * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = (*cs)[(r * half + i) * 2], s = (*cs)[(r * half + i) * 2 + 1];
        const double a = xd[off + 2 * i], b = xd[off + 2 * i + 1];
        out[off + 2 * i] = a * c - b * s;
        out[off + 2 * i + 1] = a * s + b * c;
      }
    }
  }
  return make_op("rope_apply", x.shape(), std::move(out), {x},
                 [cs, t, heads, hd, half](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t r = 0; r < t; ++r) {
                     for (std::size_t h = 0; h < heads; ++h) {
                       const std::size_t off = (r * heads + h) * hd;
                       for (std::size_t i = 0; i < half; ++i) {
                         const double c = (*cs)[(r * half + i) * 2], s = (*cs)[(r * half + i) * 2 + 1];
                         const double ga = g[off + 2 * i], gb = g[off + 2 * i + 1];
                         in[0][off + 2 * i] += ga * c + gb * s;
                         in[0][off + 2 * i + 1] += -ga * s + gb * c;
                       }
                     }
                   }
                 });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  if (table.ndim() != 2) fail(ErrorKind::kDimension, "embedding: table must be [V, d]");
  if (ids.empty()) fail(ErrorKind::kDimension, "embedding: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto td = table.data();
  std::vector<TokenId> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] >= vocab) {
      fail(ErrorKind::kIndex, "token id " + std::to_string(idv[r]) + " out of range for vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(td.data() + idv[r] * d, d, out.data() + r * d);
  }
  return make_op("embedding", {idv.size(), d}, std::move(out), {table},
                 [idv, d](std::span<const double> g, std::span<const std::span<double>> in) {
                   for (std::size_t r = 0; r < idv.size(); ++r) {
                     for (std::size_t c = 0; c < d; ++c) in[0][idv[r] * d + c] += g[r * d + c];
                   }
                 });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const KeySpan> spans) {
  if (q.ndim() != 3 || k.ndim() != 3 || k.shape() != v.shape() || q.dim(1) != k.dim(1) || q.dim(2) != k.dim(2)) {
    fail(ErrorKind::kDimension, "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                    shape_str(v.shape()));
  }
  const std::size_t tq = q.dim(0), tk = k.dim(0), heads = q.dim(1), hd = q.dim(2);
  if (spans.size() != tq) fail(ErrorKind::kDimension, "attention: one key span per query row required");
  std::vector<KeySpan> span_v(spans.begin(), spans.end());
  for (std::size_t i = 0; i < tq; ++i) {
    const auto& s = span_v[i];
    if (s.begin >= s.end || s.end > tk) fail(ErrorKind::kState, "attention: query row " + std::to_string(i) + " has no valid keys");
  }
  // Query rows are processed in blocks; each block scores the union of its
  // rows' key spans with one gemm and masks what lies outside a row's span.
  struct Block {
    std::size_t i0, i1, kb, ke, off;
  };
  constexpr std::size_t kBlock = 32;
  std::vector<Block> blocks;
  std::size_t per_head = 0;
  for (std::size_t i0 = 0; i0 < tq; i0 += kBlock) {
    const std::size_t i1 = std::min(tq, i0 + kBlock);
    std::size_t kb = tk, ke = 0;
    for (std::size_t i = i0; i < i1; ++i) {
      kb = std::min<std::size_t>(kb, span_v[i].begin);
      ke = std::max<std::size_t>(ke, span_v[i].end);
    }
    blocks.push_back({i0, i1, kb, ke, per_head});
    per_head += (i1 - i0) * (ke - kb);
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t ld = heads * hd;
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  // probs laid out [head][block][row][key in block range], zero outside spans
  auto probs = std::make_shared<std::vector<double>>(heads * per_head);
  std::vector<double> out(tq * ld, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (const auto& b : blocks) {
      const std::size_t rows = b.i1 - b.i0, w = b.ke - b.kb;
      double* p = probs->data() + h * per_head + b.off;
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(rows), blas_int(w), blas_int(hd), sc,
                  qd.data() + b.i0 * ld + h * hd, blas_int(ld), kd.data() + b.kb * ld + h * hd, blas_int(ld), 0.0, p,
                  blas_int(w));
      for (std::size_t r = 0; r < rows; ++r) {
        const auto& s = span_v[b.i0 + r];
        double* pr = p + r * w;
        const std::size_t lo = s.begin - b.kb, hi = s.end - b.kb;
        const double mx = *std::max_element(pr + lo, pr + hi);
        double z = 0.0;
        for (std::size_t j = lo; j < hi; ++j) z += (pr[j] = std::exp(pr[j] - mx));
        const double iz = 1.0 / z;
        for (std::size_t j = lo; j < hi; ++j) pr[j] *= iz;
        std::fill(pr, pr + lo, 0.0);
        std::fill(pr + hi, pr + w, 0.0);
      }
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(rows), blas_int(hd), blas_int(w), 1.0, p, blas_int(w),
                  vd.data() + b.kb * ld + h * hd, blas_int(ld), 0.0, out.data() + b.i0 * ld + h * hd, blas_int(ld));
    }
  }
  return make_op(
      "attention", q.shape(), std::move(out), {q, k, v},
      [qd, kd, vd, probs, blocks, per_head, heads, hd, ld, sc](std::span<const double> g,
                                                               std::span<const std::span<double>> in) {
        std::vector<double> ds;
        for (std::size_t h = 0; h < heads; ++h) {
          for (const auto& b : blocks) {
            const std::size_t rows = b.i1 - b.i0, w = b.ke - b.kb;
            const double* p = probs->data() + h * per_head + b.off;
            const double* gb = g.data() + b.i0 * ld + h * hd;
            if (!in[2].empty()) {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(w), blas_int(hd), blas_int(rows), 1.0, p,
                          blas_int(w), gb, blas_int(ld), 1.0, in[2].data() + b.kb * ld + h * hd, blas_int(ld));
            }
            if (in[0].empty() && in[1].empty()) continue;
            ds.resize(rows * w);
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(rows), blas_int(w), blas_int(hd), 1.0, gb,
                        blas_int(ld), vd.data() + b.kb * ld + h * hd, blas_int(ld), 0.0, ds.data(), blas_int(w));
            for (std::size_t r = 0; r < rows; ++r) {
              const double* pr = p + r * w;
              double* dr = ds.data() + r * w;
              double pd = 0.0;
              for (std::size_t j = 0; j < w; ++j) pd += pr[j] * dr[j];
              for (std::size_t j = 0; j < w; ++j) dr[j] = pr[j] * (dr[j] - pd) * sc;
            }
            if (!in[0].empty()) {
              cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(rows), blas_int(hd), blas_int(w), 1.0, ds.data(),
                          blas_int(w), kd.data() + b.kb * ld + h * hd, blas_int(ld), 1.0, in[0].data() + b.i0 * ld + h * hd,
                          blas_int(ld));
            }
            if (!in[1].empty()) {
              cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(w), blas_int(hd), blas_int(rows), 1.0, ds.data(),
                          blas_int(w), qd.data() + b.i0 * ld + h * hd, blas_int(ld), 1.0, in[1].data() + b.kb * ld + h * hd,
                          blas_int(ld));
            }
          }
        }
      });
}

namespace {

Tensor cross_entropy_impl(const Tensor& logits, std::span<const std::int32_t> targets, bool allow_ignore, const char* op) {
  if (logits.ndim() != 2) fail(ErrorKind::kDimension, std::string(op) + ": logits must be [t, V]");
  const std::size_t t = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != t) fail(ErrorKind::kDimension, std::string(op) + ": one target per row required");
  auto ld = logits.data();
  require_finite(ld, op);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::size_t counted = 0;
  for (auto target : tg) {
    if (allow_ignore && target == kIgnoreTarget) continue;
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      fail(ErrorKind::kIndex, std::string(op) + ": target " + std::to_string(target) + " outside [0, " + std::to_string(vocab) + ")");
    }
    ++counted;
  }
  auto probs = std::make_shared<std::vector<double>>(t * vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (tg[r] == kIgnoreTarget && allow_ignore) continue;
    const double* lr = ld.data() + r * vocab;
    double* pr = probs->data() + r * vocab;
    const double mx = *std::max_element(lr, lr + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += (pr[j] = std::exp(lr[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) pr[j] /= z;
    total += -(lr[tg[r]] - mx - std::log(z));
  }
  const double inv = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  return make_op(op, {1}, {total * inv}, {logits},
                 [probs, tg, t, vocab, inv, allow_ignore](std::span<const double> g, std::span<const std::span<double>> in) {
                   const double scale_g = g[0] * inv;
                   for (std::size_t r = 0; r < t; ++r) {
                     if (allow_ignore && tg[r] == kIgnoreTarget) continue;
                     const double* pr = probs->data() + r * vocab;
                     double* dr = in[0].data() + r * vocab;
                     for (std::size_t j = 0; j < vocab; ++j) dr[j] += scale_g * pr[j];
                     dr[tg[r]] -= scale_g;
                   }
                 });
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  return cross_entropy_impl(logits, targets, false, "cross_entropy");
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  return cross_entropy_impl(logits, targets, true, "masked_cross_entropy");
}

}  // namespace m1lab
