// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

#include "kernels_internal.hpp"

#include <immintrin.h>

#include <array>
#include <cstdint>

namespace latentq::kernels::detail {

namespace {

inline __m256d set1(double v) { return _mm256_set1_pd(v); }

// Cephes-style exp, valid for |x| < 708.
inline __m256d exp_pd(__m256d x) {
  const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, set1(1.4426950408889634073599)),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(n, set1(6.93145751953125E-1), x);
  r = _mm256_fnmadd_pd(n, set1(1.42860682030941723212E-6), r);
  const __m256d rr = _mm256_mul_pd(r, r);

  __m256d p = _mm256_fmadd_pd(set1(1.26177193074810590878E-4), rr, set1(3.02994407707441961300E-2));
  p = _mm256_fmadd_pd(p, rr, set1(9.99999999999999999910E-1));
  p = _mm256_mul_pd(p, r);

  __m256d q = _mm256_fmadd_pd(set1(3.00198505138664455042E-6), rr, set1(2.52448340349684104192E-3));
  q = _mm256_fmadd_pd(q, rr, set1(2.27265548208155028766E-1));
  q = _mm256_fmadd_pd(q, rr, set1(2.00000000000000000009E0));

  __m256d e = _mm256_div_pd(p, _mm256_sub_pd(q, p));
  e = _mm256_fmadd_pd(set1(2.0), e, set1(1.0));

  __m256i k = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(n));
  k = _mm256_slli_epi64(_mm256_add_epi64(k, _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(e, _mm256_castsi256_pd(k));
}

// Natural log for u in [1, 2].
inline __m256d log_1to2(__m256d u) {
  const __m256d upper = _mm256_cmp_pd(u, set1(1.41421356237309504880), _CMP_GT_OQ);
  const __m256d f = _mm256_blendv_pd(u, _mm256_mul_pd(u, set1(0.5)), upper);
  const __m256d k = _mm256_and_pd(upper, set1(1.0));
  const __m256d x = _mm256_sub_pd(f, set1(1.0));
  const __m256d z = _mm256_mul_pd(x, x);

  __m256d p = _mm256_fmadd_pd(set1(1.01875663804580931796E-4), x, set1(4.97494994976747001425E-1));
  p = _mm256_fmadd_pd(p, x, set1(4.70579119878881725854E0));
  p = _mm256_fmadd_pd(p, x, set1(1.44989225341610930846E1));
  p = _mm256_fmadd_pd(p, x, set1(1.79368678507819816313E1));
  p = _mm256_fmadd_pd(p, x, set1(7.70838733755885391666E0));

  __m256d q = _mm256_add_pd(x, set1(1.12873587189167450590E1));
  q = _mm256_fmadd_pd(q, x, set1(4.52279145837532221105E1));
  q = _mm256_fmadd_pd(q, x, set1(8.29875266912776603211E1));
  q = _mm256_fmadd_pd(q, x, set1(7.11544750618563894466E1));
  q = _mm256_fmadd_pd(q, x, set1(2.31251620126765340583E1));

  __m256d y = _mm256_mul_pd(x, _mm256_div_pd(_mm256_mul_pd(z, p), q));
  y = _mm256_fmadd_pd(k, set1(-2.121944400546905827679e-4), y);
  y = _mm256_fnmadd_pd(set1(0.5), z, y);
  const __m256d result = _mm256_add_pd(x, y);
  return _mm256_fmadd_pd(k, set1(0.693359375), result);
}

// log1p(t) for t in [0, 1], with the (u-1) correction so tiny t keep full
// relative precision.
inline __m256d log1p_unit(__m256d t) {
  const __m256d u = _mm256_add_pd(set1(1.0), t);
  const __m256d d = _mm256_sub_pd(u, set1(1.0));
  const __m256d is_one = _mm256_cmp_pd(d, _mm256_setzero_pd(), _CMP_EQ_OQ);
  const __m256d safe_d = _mm256_blendv_pd(d, set1(1.0), is_one);
  const __m256d corrected = _mm256_mul_pd(log_1to2(u), _mm256_div_pd(t, safe_d));
  return _mm256_blendv_pd(corrected, t, is_one);
}

inline __m256d abs_pd(__m256d x) { return _mm256_andnot_pd(set1(-0.0), x); }

inline __m256d clamp_pd(__m256d x) {
  return _mm256_min_pd(_mm256_max_pd(x, set1(-kLogitClamp)), set1(kLogitClamp));
}

struct LogisticParts {
  __m256d term;   // y*eta - softplus(eta)
  __m256d prob;   // sigmoid(eta)
};

// eta must already be clamped.
inline LogisticParts logistic(__m256d eta, __m256d y) {
  const __m256d e = exp_pd(_mm256_sub_pd(_mm256_setzero_pd(), abs_pd(eta)));
  const __m256d softplus = _mm256_add_pd(_mm256_max_pd(eta, _mm256_setzero_pd()), log1p_unit(e));
  const __m256d negative = _mm256_cmp_pd(eta, _mm256_setzero_pd(), _CMP_LT_OQ);
  const __m256d numer = _mm256_blendv_pd(set1(1.0), e, negative);
  const __m256d prob = _mm256_div_pd(numer, _mm256_add_pd(set1(1.0), e));
  return {_mm256_fmsub_pd(y, eta, softplus), prob};
}

inline __m256d inside_clamp(__m256d eta) {
  const __m256d lo = _mm256_cmp_pd(eta, set1(-kLogitClamp), _CMP_GE_OQ);
  const __m256d hi = _mm256_cmp_pd(eta, set1(kLogitClamp), _CMP_LE_OQ);
  return _mm256_and_pd(lo, hi);
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

inline __m256i tail_mask(std::size_t remaining) {
  const __m256i lanes = _mm256_set_epi64x(3, 2, 1, 0);
  return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<std::int64_t>(remaining)), lanes);
}

void linear_predictor(std::span<double> out, std::span<const double> offset,
                      std::span<const double* const> columns, std::span<const double> coef) {
  const std::size_t n = out.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d acc = _mm256_loadu_pd(offset.data() + i);
    for (std::size_t c = 0; c < columns.size(); ++c)
      acc = _mm256_fmadd_pd(set1(coef[c]), _mm256_loadu_pd(columns[c] + i), acc);
    _mm256_storeu_pd(out.data() + i, acc);
  }
  if (i < n) {
    const __m256i m = tail_mask(n - i);
    __m256d acc = _mm256_maskload_pd(offset.data() + i, m);
    for (std::size_t c = 0; c < columns.size(); ++c)
      acc = _mm256_fmadd_pd(set1(coef[c]), _mm256_maskload_pd(columns[c] + i, m), acc);
    _mm256_maskstore_pd(out.data() + i, m, acc);
  }
}

double bernoulli_fields(std::span<const double> eta, std::span<const double> y,
                        std::span<const double> w, std::span<double> resid) {
  const std::size_t n = eta.size();
  const bool want_resid = !resid.empty();
  __m256d total = _mm256_setzero_pd();
  for (std::size_t i = 0; i < n; i += 4) {
    const __m256i m = tail_mask(n - i);
    const __m256d raw = _mm256_maskload_pd(eta.data() + i, m);
    const __m256d yv = _mm256_maskload_pd(y.data() + i, m);
    const __m256d wv = _mm256_maskload_pd(w.data() + i, m);
    const LogisticParts parts = logistic(clamp_pd(raw), yv);
    total = _mm256_fmadd_pd(wv, parts.term, total);
    if (want_resid) {
      const __m256d r = _mm256_and_pd(_mm256_mul_pd(wv, _mm256_sub_pd(yv, parts.prob)), inside_clamp(raw));
      _mm256_maskstore_pd(resid.data() + i, m, r);
    }
  }
  return hsum(total);
}

double gaussian_fields(std::span<const double> mean, std::span<const double> z,
                       std::span<const double> w, std::span<const double> inv_sd,
                       std::span<double> resid) {
  const std::size_t n = mean.size();
  const bool want_resid = !resid.empty();
  __m256d total = _mm256_setzero_pd();
  for (std::size_t i = 0; i < n; i += 4) {
    const __m256i m = tail_mask(n - i);
    const __m256d r = _mm256_sub_pd(_mm256_maskload_pd(z.data() + i, m), _mm256_maskload_pd(mean.data() + i, m));
    const __m256d inv = _mm256_maskload_pd(inv_sd.data() + i, m);
    const __m256d wv = _mm256_maskload_pd(w.data() + i, m);
    const __m256d s = _mm256_mul_pd(r, inv);
    total = _mm256_fmadd_pd(wv, _mm256_mul_pd(s, s), total);
    if (want_resid) _mm256_maskstore_pd(resid.data() + i, m, _mm256_mul_pd(wv, _mm256_mul_pd(s, inv)));
  }
  return hsum(total);
}

template <bool Bernoulli>
void block_kernel(const SampleBlock& block, double target, BlockSums& out) {
  const std::size_t d = block.columns.size();
  if (d > kMaxSimdDim) {
    if constexpr (Bernoulli) {
      kScalarTable.bernoulli_block(block, target, out);
    } else {
      kScalarTable.gaussian_block(block, target, out);
    }
    return;
  }
  __m256d dot[kMaxSimdDim];
  __m256d coef[kMaxSimdDim];
  for (std::size_t c = 0; c < d; ++c) {
    dot[c] = _mm256_setzero_pd();
    coef[c] = set1(block.coef[c]);
  }
  __m256d value = _mm256_setzero_pd();
  __m256d resid = _mm256_setzero_pd();
  const __m256d tv = set1(target);
  const __m256d offset = set1(block.offset);
  const std::size_t n = block.len;

  for (std::size_t i = 0; i < n; i += 4) {
    const __m256i m = tail_mask(n - i);
    const __m256d active = _mm256_castsi256_pd(m);
    __m256d x[kMaxSimdDim];
    __m256d eta = offset;
    for (std::size_t c = 0; c < d; ++c) {
      x[c] = _mm256_maskload_pd(block.columns[c] + i, m);
      eta = _mm256_fmadd_pd(coef[c], x[c], eta);
    }
    __m256d r;
    if constexpr (Bernoulli) {
      const LogisticParts parts = logistic(clamp_pd(eta), tv);
      value = _mm256_add_pd(value, _mm256_and_pd(parts.term, active));
      r = _mm256_and_pd(_mm256_sub_pd(tv, parts.prob), _mm256_and_pd(inside_clamp(eta), active));
    } else {
      r = _mm256_and_pd(_mm256_sub_pd(tv, eta), active);
      value = _mm256_fmadd_pd(r, r, value);
    }
    resid = _mm256_add_pd(resid, r);
    for (std::size_t c = 0; c < d; ++c) dot[c] = _mm256_fmadd_pd(r, x[c], dot[c]);
  }

  out.value += hsum(value);
  out.resid += hsum(resid);
  for (std::size_t c = 0; c < d; ++c) out.resid_dot[c] += hsum(dot[c]);
}

void bernoulli_block(const SampleBlock& block, double y, BlockSums& out) { block_kernel<true>(block, y, out); }

void gaussian_block(const SampleBlock& block, double z, BlockSums& out) { block_kernel<false>(block, z, out); }

}  // namespace

const KernelTable kAvx2Table{
    "avx2", &linear_predictor, &bernoulli_fields, &gaussian_fields, &bernoulli_block, &gaussian_block,
};

}  // namespace latentq::kernels::detail
