#pragma once

// 1-D neighborhood attention.
//
// Two implementations of the same math:
//   - a naive reference path that evaluates the windowed attention
//     definition directly, one query at a time (the oracle)
//   - a blocked path that processes M queries per tile and computes the
//     logits as M x NL x K block products over the tile's union window of
//     NL = ceil((M+W-1)/N)*N contiguous key lanes, computing redundant
//     lanes and discarding them by masking after the product
//
// Padded mode end-pads keys/values with floor(W/2) zero frames per side, so
// out-of-range window positions participate in the softmax with logit
// exactly 0 and contribute zero value vectors. Clamped mode shifts each
// window to lie fully inside the sequence and requires T >= W.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <vector>

#include "pcfnat/common.hpp"
#include "pcfnat/tensor.hpp"

namespace pcfnat {

enum class NaPadding { padded, clamped };
enum class NaImpl { naive, blocked };

struct NaConfig {
  int window = 27;    // W, odd
  int heads = 16;     // H
  int channels = 256; // C, divisible by H
  NaPadding padding = NaPadding::padded;
  double scale = 0.0; // 0 -> 1/sqrt(channels/heads)

  int head_dim() const { return channels / heads; }
  double logit_scale() const {
    return scale != 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(head_dim()));
  }
  void validate() const {
    if (window < 1 || window % 2 == 0)
      throw config_error(strcat_msg("NA window must be odd and >= 1, got ", window));
    if (heads < 1) throw config_error("NA heads must be positive");
    if (channels < 1 || channels % heads != 0)
      throw config_error(strcat_msg("NA channels (", channels, ") must be divisible by heads (",
                                    heads, ")"));
  }
};

struct TileShape {
  int m = 16;  // queries per tile
  int n = 8;   // key columns per block product
  int k = 16;  // reduction extent of one block product
  void validate() const {
    if (m <= 0 || n <= 0 || k <= 0) throw config_error("tile extents must be positive");
  }
};

// Eq.-style effective-computation ratio of the tiled scheme: the W useful
// key lanes out of the ceil((M+W-1)/N)*N computed per query row.
struct EffectiveRatio {
  long long numerator = 0;
  long long denominator = 1;
  double value() const {
    return static_cast<double>(numerator) / static_cast<double>(denominator);
  }
};

inline EffectiveRatio effective_ratio(long long m, long long n, long long w) {
  if (m <= 0 || n <= 0 || w <= 0)
    throw contract_error(strcat_msg("effective_ratio: all arguments must be positive, got M=", m,
                                    " N=", n, " W=", w));
  const long long lanes = (m + w - 1 + n - 1) / n * n;
  return {w, lanes};
}

// One-line report used by the benchmark surface. At the published tile
// shape the direct formula value (56.25%) sits one rounding unit under the
// published 56.26% figure; the note flags that rather than adjusting either.
inline std::string effective_ratio_report(int m, int n, int w) {
  const auto r = effective_ratio(m, n, w);
  std::ostringstream os;
  os << "effective ratio " << r.numerator << "/" << r.denominator << " = " << r.value() << " ("
     << 100.0 * r.value() << "%)";
  if (m == 16 && n == 8 && w == 27)
    os << "; published figure 56.26% differs from the formula value 56.25% by one rounding unit";
  return os.str();
}

// ---------------------------------------------------------------------------
// Raw kernels (contiguous [G,T,d] buffers, G = batch*heads)
// ---------------------------------------------------------------------------

namespace na_detail {

// Window start for query t. Padded windows may hang over the ends (the
// mapping to key index j = start + w is range-checked by callers).
inline index_t window_start(index_t t, index_t seq, index_t w_size, bool clamped) {
  const index_t r = w_size / 2;
  if (!clamped) return t - r;
  return std::clamp(t - r, index_t{0}, seq - w_size);
}

template <class T>
void softmax_row(T* row, index_t w_size) {
  T mx = row[0];
  for (index_t i = 1; i < w_size; ++i) mx = std::max(mx, row[i]);
  T denom = 0;
  for (index_t i = 0; i < w_size; ++i) {
    row[i] = std::exp(row[i] - mx);
    denom += row[i];
  }
  const T inv = T(1) / denom;
  for (index_t i = 0; i < w_size; ++i) row[i] *= inv;
}

#if defined(__GNUC__) || defined(__clang__)

// All vector-typed helpers are inline within this header, so the vector ABI
// warning for non-AVX targets does not apply.
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wpsabi"

typedef float v8f __attribute__((vector_size(32)));
typedef std::int32_t v8i __attribute__((vector_size(32)));

// Cephes-style single-precision exp, scalar and 8-lane twins with the same
// coefficients so tail lanes match vector lanes.
inline float fast_expf(float x) {
  x = std::min(std::max(x, -88.3762626647949f), 88.3762626647949f);
  const float fx = x * 1.44269504088896341f + 0.5f;
  float nf = static_cast<float>(static_cast<std::int32_t>(fx));
  if (nf > fx) nf -= 1.0f;
  x -= nf * 0.693359375f;
  x -= nf * -2.12194440e-4f;
  const float z = x * x;
  float y = 1.9875691500e-4f;
  y = y * x + 1.3981999507e-3f;
  y = y * x + 8.3334519073e-3f;
  y = y * x + 4.1665795894e-2f;
  y = y * x + 1.6666665459e-1f;
  y = y * x + 5.0000001201e-1f;
  y = y * z + x + 1.0f;
  const std::int32_t pow2n = (static_cast<std::int32_t>(nf) + 127) << 23;
  float p;
  std::memcpy(&p, &pow2n, sizeof(p));
  return y * p;
}

inline v8f fast_exp8f(v8f x) {
  const v8f hi = 88.3762626647949f + v8f{};
  const v8f lo = -88.3762626647949f + v8f{};
  x = (x > hi) ? hi : x;
  x = (x < lo) ? lo : x;
  const v8f fx = x * 1.44269504088896341f + 0.5f;
  v8i n = __builtin_convertvector(fx, v8i);
  v8f nf = __builtin_convertvector(n, v8f);
  n += (nf > fx);  // mask is -1 where truncation rounded up
  nf = __builtin_convertvector(n, v8f);
  x -= nf * 0.693359375f;
  x -= nf * -2.12194440e-4f;
  const v8f z = x * x;
  v8f y = 1.9875691500e-4f + v8f{};
  y = y * x + 1.3981999507e-3f;
  y = y * x + 8.3334519073e-3f;
  y = y * x + 4.1665795894e-2f;
  y = y * x + 1.6666665459e-1f;
  y = y * x + 5.0000001201e-1f;
  y = y * z + x + 1.0f;
  const v8i pow2n = (n + 127) << 23;
  v8f p;
  std::memcpy(&p, &pow2n, sizeof(p));
  return y * p;
}

// Fused band scale+softmax for the blocked float path: reads the W-lane
// band of a logit row, writes normalized weights to the attention row and
// the A2 operand band. buf must hold W rounded up to 8; pad lanes map to
// exp(-inf) = 0 and wash out of the denominator.
inline void band_softmax(const float* srow, float sc, float* attn_row, float* a2_band,
                         index_t w_size, float* buf) {
  float mx = srow[0] * sc;
  for (index_t w = 0; w < w_size; ++w) {
    buf[w] = srow[w] * sc;
    mx = std::max(mx, buf[w]);
  }
  const index_t wpad = (w_size + 7) / 8 * 8;
  for (index_t w = w_size; w < wpad; ++w) buf[w] = -1e30f;
  const v8f vmx = mx + v8f{};
  v8f vsum = {};
  for (index_t w0 = 0; w0 < wpad; w0 += 8) {
    v8f r;
    std::memcpy(&r, buf + w0, sizeof(r));
    r = fast_exp8f(r - vmx);
    std::memcpy(buf + w0, &r, sizeof(r));
    vsum += r;
  }
  float denom = 0;
  for (int l = 0; l < 8; ++l) denom += vsum[l];
  const float inv = 1.0f / denom;
  for (index_t w = 0; w < w_size; ++w) {
    const float a = buf[w] * inv;
    attn_row[w] = a;
    a2_band[w] = a;
  }
}

// float specialization: both NA paths call this, so the comparison between
// them stays about the attention arithmetic, not libm.
inline void softmax_row(float* row, index_t w_size) {
  float mx = row[0];
  for (index_t i = 1; i < w_size; ++i) mx = std::max(mx, row[i]);
  float denom = 0;
  index_t i = 0;
  if (w_size >= 8) {
    const v8f vmx = mx + v8f{};
    v8f vsum = {};
    for (; i + 8 <= w_size; i += 8) {
      v8f r;
      std::memcpy(&r, row + i, sizeof(r));
      r = fast_exp8f(r - vmx);
      std::memcpy(row + i, &r, sizeof(r));
      vsum += r;
    }
    for (int l = 0; l < 8; ++l) denom += vsum[l];
  }
  for (; i < w_size; ++i) {
    row[i] = fast_expf(row[i] - mx);
    denom += row[i];
  }
  const float inv = 1.0f / denom;
  for (index_t j = 0; j < w_size; ++j) row[j] *= inv;
}

#pragma GCC diagnostic pop

#endif  // vector extensions

// Plain tile GEMMs without zero-skipping: redundant lanes are computed on
// purpose (that is the scheme being reproduced).
template <class T>
void tile_gemm(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    for (index_t k = 0; k < K; ++k) {
      const T a = a_row[k];
      const T* b_row = B + k * N;
      for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,N] = A[M,K] * B[K,N] with overwrite semantics (no pre-zeroed C).
template <class T>
void tile_gemm_set(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    {
      const T a = a_row[0];
      for (index_t j = 0; j < N; ++j) c_row[j] = a * B[j];
    }
    for (index_t k = 1; k < K; ++k) {
      const T a = a_row[k];
      const T* b_row = B + k * N;
      for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

#if defined(__GNUC__) || defined(__clang__)
#define PCFNAT_HAVE_VECEXT 1

template <class T>
struct SimdVec8 {
  typedef T type __attribute__((vector_size(8 * sizeof(T))));
};

// Register-resident micro-kernel: C[M, 8*NCHUNKS] = A[M,K] * B[K, 8*NCHUNKS].
// The accumulator row is NCHUNKS explicit 8-lane vectors, held across the
// whole reduction; per k step: one broadcast + NCHUNKS fused multiply-adds.
template <class T, int NCHUNKS>
void tile_gemm_set_vec(const T* __restrict__ A, const T* __restrict__ B, T* __restrict__ C,
                       index_t M, index_t K) {
  using V8 = typename SimdVec8<T>::type;
  constexpr index_t N = 8 * NCHUNKS;
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    V8 acc[NCHUNKS] = {};
    for (index_t k = 0; k < K; ++k) {
      const V8 av = a_row[k] + V8{};
      const T* b_row = B + k * N;
      for (int c = 0; c < NCHUNKS; ++c) {
        V8 b;
        std::memcpy(&b, b_row + 8 * c, sizeof(V8));
        acc[c] += av * b;
      }
    }
    for (int c = 0; c < NCHUNKS; ++c) std::memcpy(C + i * N + 8 * c, &acc[c], sizeof(V8));
  }
}
#endif

// Dispatch: vector micro-kernel for the 8-lane-multiple column counts the
// default tiles produce, scalar fallback for everything else.
template <class T>
void tile_gemm_set_dispatch(const T* A, const T* B, T* C, index_t M, index_t K, index_t N) {
#ifdef PCFNAT_HAVE_VECEXT
  switch (N) {
    case 8: tile_gemm_set_vec<T, 1>(A, B, C, M, K); return;
    case 16: tile_gemm_set_vec<T, 2>(A, B, C, M, K); return;
    case 24: tile_gemm_set_vec<T, 3>(A, B, C, M, K); return;
    case 32: tile_gemm_set_vec<T, 4>(A, B, C, M, K); return;
    case 40: tile_gemm_set_vec<T, 5>(A, B, C, M, K); return;
    case 48: tile_gemm_set_vec<T, 6>(A, B, C, M, K); return;
    default: break;
  }
#endif
  tile_gemm_set(A, B, C, M, K, N);
}

// C[M,N] += A[M,K] * Bt^T with Bt stored [N,K].
template <class T>
void tile_gemm_bt(const T* A, const T* Bt, T* C, index_t M, index_t K, index_t N) {
  for (index_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    for (index_t j = 0; j < N; ++j) {
      const T* b_row = Bt + j * K;
      T acc = 0;
      for (index_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
      c_row[j] += acc;
    }
  }
}

// C[L,N] += A^T * B with A stored [M,L], B stored [M,N].
template <class T>
void tile_gemm_tn(const T* A, const T* B, T* C, index_t M, index_t L, index_t N) {
  for (index_t m = 0; m < M; ++m) {
    const T* a_row = A + m * L;
    const T* b_row = B + m * N;
    for (index_t l = 0; l < L; ++l) {
      const T a = a_row[l];
      T* c_row = C + l * N;
      for (index_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace na_detail

// out [G,T,d], attn [G,T,W]; direct evaluation of the windowed attention.
template <class T>
void na_forward_naive(const T* q, const T* k, const T* v, T* out, T* attn, index_t G,
                      index_t seq, index_t d, const NaConfig& cfg) {
  const index_t W = cfg.window;
  const bool clamped = cfg.padding == NaPadding::clamped;
  const T sc = static_cast<T>(cfg.logit_scale());
  for (index_t g = 0; g < G; ++g) {
    const T* qg = q + g * seq * d;
    const T* kg = k + g * seq * d;
    const T* vg = v + g * seq * d;
    T* og = out + g * seq * d;
    T* ag = attn + g * seq * W;
    for (index_t t = 0; t < seq; ++t) {
      const index_t start = na_detail::window_start(t, seq, W, clamped);
      T* arow = ag + t * W;
      const T* qrow = qg + t * d;
      for (index_t w = 0; w < W; ++w) {
        const index_t j = start + w;
        T logit = 0;
        if (j >= 0 && j < seq) {
          const T* krow = kg + j * d;
          T acc = 0;
          for (index_t c = 0; c < d; ++c) acc += qrow[c] * krow[c];
          logit = acc * sc;
        }
        arow[w] = logit;  // zero-padded key frames keep logit exactly 0
      }
      na_detail::softmax_row(arow, W);
      T* orow = og + t * d;
      std::fill(orow, orow + d, T(0));
      for (index_t w = 0; w < W; ++w) {
        const index_t j = start + w;
        if (j < 0 || j >= seq) continue;  // zero value frame
        const T a = arow[w];
        const T* vrow = vg + j * d;
        for (index_t c = 0; c < d; ++c) orow[c] += a * vrow[c];
      }
    }
  }
}

// Gradients of the windowed-attention composition given the saved softmax
// output. Accumulates into dq/dk/dv; padded-region contributions drop.
template <class T>
void na_backward_naive(const T* grad_out, const T* q, const T* k, const T* v, const T* attn,
                       T* dq, T* dk, T* dv, index_t G, index_t seq, index_t d,
                       const NaConfig& cfg) {
  const index_t W = cfg.window;
  const bool clamped = cfg.padding == NaPadding::clamped;
  const T sc = static_cast<T>(cfg.logit_scale());
  std::vector<T> dp(static_cast<std::size_t>(W));
  for (index_t g = 0; g < G; ++g) {
    const T* qg = q + g * seq * d;
    const T* kg = k + g * seq * d;
    const T* vg = v + g * seq * d;
    const T* ag = attn + g * seq * W;
    const T* gog = grad_out + g * seq * d;
    T* dqg = dq + g * seq * d;
    T* dkg = dk + g * seq * d;
    T* dvg = dv + g * seq * d;
    for (index_t t = 0; t < seq; ++t) {
      const index_t start = na_detail::window_start(t, seq, W, clamped);
      const T* arow = ag + t * W;
      const T* go = gog + t * d;
      const T* qrow = qg + t * d;
      T dot = 0;
      for (index_t w = 0; w < W; ++w) {
        const index_t j = start + w;
        T acc = 0;
        if (j >= 0 && j < seq) {
          const T* vrow = vg + j * d;
          for (index_t c = 0; c < d; ++c) acc += go[c] * vrow[c];
        }
        dp[static_cast<std::size_t>(w)] = acc;
        dot += arow[w] * acc;
      }
      T* dqrow = dqg + t * d;
      for (index_t w = 0; w < W; ++w) {
        const index_t j = start + w;
        if (j < 0 || j >= seq) continue;
        const T ds = sc * arow[w] * (dp[static_cast<std::size_t>(w)] - dot);
        const T aw = arow[w];
        const T* krow = kg + j * d;
        T* dkrow = dkg + j * d;
        T* dvrow = dvg + j * d;
        for (index_t c = 0; c < d; ++c) {
          dqrow[c] += ds * krow[c];
          dkrow[c] += ds * qrow[c];
          dvrow[c] += aw * go[c];
        }
      }
    }
  }
}

// Scratch for one tile of the blocked path.
template <class T>
struct NaTileScratch {
  std::vector<T> q_pack;   // [M][d]
  std::vector<T> kt_pack;  // [d][NL]
  std::vector<T> k_pack;   // [NL][d]
  std::vector<T> v_pack;   // [NL][d]
  std::vector<T> s;        // [M][NL]
  std::vector<T> a2;       // [M][NL]
  std::vector<T> o;        // [M][d]
  void resize(index_t m, index_t nl, index_t d) {
    q_pack.assign(static_cast<std::size_t>(m * d), T(0));
    kt_pack.assign(static_cast<std::size_t>(d * nl), T(0));
    k_pack.assign(static_cast<std::size_t>(nl * d), T(0));
    v_pack.assign(static_cast<std::size_t>(nl * d), T(0));
    s.assign(static_cast<std::size_t>(m * nl), T(0));
    a2.assign(static_cast<std::size_t>(m * nl), T(0));
    o.assign(static_cast<std::size_t>(m * d), T(0));
  }
};

// Blocked GEMM-style forward (padded mode only). Mathematically identical
// to the naive path: per query tile the full M x NL logit block is computed
// and the lanes outside each query's W-window are discarded afterwards.
// The default M16/N8/K16 tile with W=27 (NL=48) dispatches to fixed-size
// micro-kernels whose accumulators stay in registers.
template <class T>
void na_forward_blocked(const T* q, const T* k, const T* v, T* out, T* attn, index_t G,
                        index_t seq, index_t d, const NaConfig& cfg, const TileShape& tile) {
  if (cfg.padding != NaPadding::padded)
    throw contract_error("na_forward_blocked: padded mode only");
  tile.validate();
  const index_t W = cfg.window;
  const index_t r = W / 2;
  const index_t M = tile.m;
  const index_t NL = effective_ratio(tile.m, tile.n, W).denominator;
  const T sc = static_cast<T>(cfg.logit_scale());

  std::vector<T> q_pack(static_cast<std::size_t>(M * d));
  std::vector<T> kt_pack(static_cast<std::size_t>(d * NL));
  std::vector<T> v_pack(static_cast<std::size_t>(NL * d));
  std::vector<T> s(static_cast<std::size_t>(M * NL));
  std::vector<T> a2(static_cast<std::size_t>(M * NL), T(0));
  std::vector<T> o(static_cast<std::size_t>(M * d));
  std::vector<T> band(static_cast<std::size_t>((W + 7) / 8 * 8));

  for (index_t g = 0; g < G; ++g) {
    const T* qg = q + g * seq * d;
    const T* kg = k + g * seq * d;
    const T* vg = v + g * seq * d;
    T* og = out + g * seq * d;
    T* ag = attn + g * seq * W;
    for (index_t t0 = 0; t0 < seq; t0 += M) {
      const index_t rows = std::min(M, seq - t0);
      // Pack Q rows (zero rows past the sequence end).
      std::copy(qg + t0 * d, qg + (t0 + rows) * d, q_pack.begin());
      if (rows < M) std::fill(q_pack.begin() + rows * d, q_pack.end(), T(0));
      // Pack the tile's union window of NL contiguous key lanes; lanes
      // outside [0,seq) stay zero (the SASA end padding), so boundary tiles
      // clear the packs first and interior tiles skip that.
      const index_t lo = std::max(index_t{0}, r - t0);
      const index_t hi = std::min(NL, seq - t0 + r);
      if (lo > 0 || hi < NL) {
        std::fill(kt_pack.begin(), kt_pack.end(), T(0));
        std::fill(v_pack.begin(), v_pack.end(), T(0));
      }
      for (index_t l = lo; l < hi; ++l) {
        const index_t j = t0 - r + l;
        const T* krow = kg + j * d;
        for (index_t c = 0; c < d; ++c) kt_pack[static_cast<std::size_t>(c * NL + l)] = krow[c];
        std::copy(vg + j * d, vg + (j + 1) * d, v_pack.begin() + l * d);
      }
      // Logit block product: S[M,NL] = Q * K^T (redundant lanes included).
      na_detail::tile_gemm_set_dispatch(q_pack.data(), kt_pack.data(), s.data(), M, d, NL);
      // Mask: keep each row's W-lane band, softmax it, and lay the weights
      // back into the zeroed M x NL operand for the value product.
      for (index_t m = 0; m < rows; ++m) {
        T* arow = ag + (t0 + m) * W;
        const T* srow = s.data() + m * NL;
        T* a2row = a2.data() + m * NL;
#ifdef PCFNAT_HAVE_VECEXT
        if constexpr (std::is_same_v<T, float>) {
          na_detail::band_softmax(srow + m, sc, arow, a2row + m, W, band.data());
          continue;
        }
#endif
        for (index_t w = 0; w < W; ++w) arow[w] = srow[m + w] * sc;
        na_detail::softmax_row(arow, W);
        for (index_t w = 0; w < W; ++w) a2row[m + w] = arow[w];
      }
      // Output block product: O[M,d] = A2 * V.
      na_detail::tile_gemm_set_dispatch(a2.data(), v_pack.data(), o.data(), M, NL, d);
      for (index_t m = 0; m < rows; ++m)
        std::copy(o.begin() + m * d, o.begin() + (m + 1) * d, og + (t0 + m) * d);
      // Re-zero the written bands so the next tile starts clean.
      for (index_t m = 0; m < rows; ++m) {
        T* a2row = a2.data() + m * NL;
        for (index_t w = 0; w < W; ++w) a2row[m + w] = T(0);
      }
    }
  }
}

// Blocked backward: the query/key gradients run through the same tiled
// block products as the forward; lane gradients scatter-add back with
// padded lanes dropped.
template <class T>
void na_backward_blocked(const T* grad_out, const T* q, const T* k, const T* v, const T* attn,
                         T* dq, T* dk, T* dv, index_t G, index_t seq, index_t d,
                         const NaConfig& cfg, const TileShape& tile) {
  if (cfg.padding != NaPadding::padded)
    throw contract_error("na_backward_blocked: padded mode only");
  tile.validate();
  const index_t W = cfg.window;
  const index_t r = W / 2;
  const index_t M = tile.m;
  const index_t NL = effective_ratio(tile.m, tile.n, W).denominator;
  const T sc = static_cast<T>(cfg.logit_scale());

  NaTileScratch<T> ts;
  std::vector<T> dout_pack, da2, ds2, dq_tile, dk_lane, dv_lane;
  for (index_t g = 0; g < G; ++g) {
    const T* qg = q + g * seq * d;
    const T* kg = k + g * seq * d;
    const T* vg = v + g * seq * d;
    const T* ag = attn + g * seq * W;
    const T* gog = grad_out + g * seq * d;
    T* dqg = dq + g * seq * d;
    T* dkg = dk + g * seq * d;
    T* dvg = dv + g * seq * d;
    for (index_t t0 = 0; t0 < seq; t0 += M) {
      const index_t rows = std::min(M, seq - t0);
      ts.resize(M, NL, d);
      dout_pack.assign(static_cast<std::size_t>(M * d), T(0));
      da2.assign(static_cast<std::size_t>(M * NL), T(0));
      ds2.assign(static_cast<std::size_t>(M * NL), T(0));
      dq_tile.assign(static_cast<std::size_t>(M * d), T(0));
      dk_lane.assign(static_cast<std::size_t>(NL * d), T(0));
      dv_lane.assign(static_cast<std::size_t>(NL * d), T(0));

      for (index_t m = 0; m < rows; ++m) {
        std::copy(qg + (t0 + m) * d, qg + (t0 + m + 1) * d, ts.q_pack.begin() + m * d);
        std::copy(gog + (t0 + m) * d, gog + (t0 + m + 1) * d, dout_pack.begin() + m * d);
        const T* arow = ag + (t0 + m) * W;
        T* a2row = ts.a2.data() + m * NL;
        for (index_t w = 0; w < W; ++w) a2row[m + w] = arow[w];
      }
      for (index_t l = 0; l < NL; ++l) {
        const index_t j = t0 - r + l;
        if (j < 0 || j >= seq) continue;
        std::copy(kg + j * d, kg + (j + 1) * d, ts.k_pack.begin() + l * d);
        std::copy(vg + j * d, vg + (j + 1) * d, ts.v_pack.begin() + l * d);
      }

      // dA2[M,NL] = dOut * V^T
      na_detail::tile_gemm_bt(dout_pack.data(), ts.v_pack.data(), da2.data(), M, d, NL);
      // Per-row softmax backward on the band, rescaled into dS2.
      for (index_t m = 0; m < rows; ++m) {
        const T* arow = ag + (t0 + m) * W;
        const T* darow = da2.data() + m * NL;
        T dot = 0;
        for (index_t w = 0; w < W; ++w) dot += arow[w] * darow[m + w];
        T* dsrow = ds2.data() + m * NL;
        for (index_t w = 0; w < W; ++w)
          dsrow[m + w] = sc * arow[w] * (darow[m + w] - dot);
      }
      // dQ[M,d] = dS2 * K ; dK[NL,d] = dS2^T * Q ; dV[NL,d] = A2^T * dOut
      na_detail::tile_gemm(ds2.data(), ts.k_pack.data(), dq_tile.data(), M, NL, d);
      na_detail::tile_gemm_tn(ds2.data(), ts.q_pack.data(), dk_lane.data(), M, NL, d);
      na_detail::tile_gemm_tn(ts.a2.data(), dout_pack.data(), dv_lane.data(), M, NL, d);

      for (index_t m = 0; m < rows; ++m) {
        T* dqrow = dqg + (t0 + m) * d;
        for (index_t c = 0; c < d; ++c) dqrow[c] += dq_tile[static_cast<std::size_t>(m * d + c)];
      }
      for (index_t l = 0; l < NL; ++l) {
        const index_t j = t0 - r + l;
        if (j < 0 || j >= seq) continue;  // padded-lane gradients are dropped
        T* dkrow = dkg + j * d;
        T* dvrow = dvg + j * d;
        for (index_t c = 0; c < d; ++c) {
          dkrow[c] += dk_lane[static_cast<std::size_t>(l * d + c)];
          dvrow[c] += dv_lane[static_cast<std::size_t>(l * d + c)];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Tensor-level op (tape-integrated)
// ---------------------------------------------------------------------------

template <class T>
struct NaResult {
  Tensor<T> out;   // [G,T,d]
  Tensor<T> attn;  // [G,T,W], rows sum to 1 (inspection output, not differentiable)
};

template <class T>
NaResult<T> neighborhood_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   const NaConfig& cfg, NaImpl impl = NaImpl::blocked,
                                   TileShape tile = TileShape{}, Tape<T>* tape = nullptr) {
  cfg.validate();
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw dim_error(strcat_msg("neighborhood_attention: q/k/v must share a [G,T,d] shape, got ",
                               shape_str(q.shape()), " ", shape_str(k.shape()), " ",
                               shape_str(v.shape())));
  const index_t G = q.dim(0), seq = q.dim(1), d = q.dim(2);
  if (d != cfg.head_dim())
    throw config_error(strcat_msg("neighborhood_attention: head dim ", d,
                                  " does not match channels/heads = ", cfg.head_dim()));
  if (seq < 1) throw contract_error("neighborhood_attention: empty sequence");
  if (cfg.padding == NaPadding::clamped && seq < cfg.window)
    throw contract_error(strcat_msg("clamped NA needs T >= W, got T=", seq, " W=", cfg.window));
  if (cfg.padding == NaPadding::clamped && impl == NaImpl::blocked)
    throw contract_error("blocked NA path supports padded mode only");

  Tensor<T> out = Tensor<T>::zeros(q.shape());
  Tensor<T> attn = Tensor<T>::zeros({G, seq, cfg.window});
  if (impl == NaImpl::naive)
    na_forward_naive(q.data().data(), k.data().data(), v.data().data(), out.data().data(),
                     attn.data().data(), G, seq, d, cfg);
  else
    na_forward_blocked(q.data().data(), k.data().data(), v.data().data(), out.data().data(),
                       attn.data().data(), G, seq, d, cfg, tile);
  detail::check_finite(out, "neighborhood_attention");

  if (tape && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([q1 = q, k1 = k, v1 = v, a1 = attn, o1 = out, cfg, impl, tile, G, seq,
                  d]() mutable {
      if (!o1.has_grad()) return;
      // The kernels accumulate all three gradients in one pass; route them
      // into whichever inputs participate.
      Tensor<T> dq = Tensor<T>::zeros(q1.shape());
      Tensor<T> dk = Tensor<T>::zeros(k1.shape());
      Tensor<T> dv = Tensor<T>::zeros(v1.shape());
      if (impl == NaImpl::naive)
        na_backward_naive(o1.grad().data(), q1.data().data(), k1.data().data(),
                          v1.data().data(), a1.data().data(), dq.data().data(),
                          dk.data().data(), dv.data().data(), G, seq, d, cfg);
      else
        na_backward_blocked(o1.grad().data(), q1.data().data(), k1.data().data(),
                            v1.data().data(), a1.data().data(), dq.data().data(),
                            dk.data().data(), dv.data().data(), G, seq, d, cfg, tile);
      auto route = [](Tensor<T>& dst, const Tensor<T>& src) {
        if (!dst.requires_grad()) return;
        auto g = dst.grad_accum();
        auto s = src.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s[i];
      };
      route(q1, dq);
      route(k1, dk);
      route(v1, dv);
    });
  }
  return {out, attn};
}

}  // namespace pcfnat
