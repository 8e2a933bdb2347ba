// SPDX-License-Identifier: Apache-2.0
//
// Conditional velocity field f(x; z). Latents first exchange information in
// a self-attention layer whose keys and values see the pairwise pose
// attribute; each query then attends to all latents with a Gaussian window
// bias, and every latent contributes a local 2-vector expressed in its own
// frame.
#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/latent.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/nn.hpp"

namespace eqcollide {

/// How a pair of poses is turned into an attribute.
enum class PairAttribute {
  se2_frame,  // R(-theta_j)(x_q - x_j): relative position in the latent frame
  relative,   // x_q - x_j
  sum,        // x_q + x_j (deliberately not invariant)
};

struct FieldAttentionSpec {
  std::size_t heads = 1;
  double sigma = 0.1;
  PairAttribute attribute = PairAttribute::se2_frame;
  bool rotate_output = true;  // express each latent's vector in its frame
};

namespace detail {
template <class T>
inline void rff(const ad::Tensor<T>& B, T bx, T by, T* out) {
  const std::size_t nf = B.rows;
  for (std::size_t m = 0; m < nf; ++m) {
    const T s = B(m, 0) * bx + B(m, 1) * by;
    out[m] = std::sin(s);
    out[nf + m] = std::cos(s);
  }
}
}  // namespace detail

/// Fused cross-attention from queries to latents.
///
///   xq (Q x 2), xl (M x 2), theta (M x 1)
///   U    (M x heads*2*nq)     query-side weights per latent and head
///   A    (M x heads*2*2*nv)   value map per latent and head, 2 rows each
///   beta (M x heads*2)        value offset per latent and head
///   BQ (nq x 2), BV (nv x 2)  fixed random frequencies
///
/// logit_hj = U_jh . phiQ(b_j) / sqrt(2 nq) - |xq - xj|^2 / (2 sigma^2),
/// softmax over j, l_hj = A_jh phiV(b_j) + beta_jh, out = sum_hj a_hj R(theta_j) l_hj.
template <class T>
ad::Var field_cross_attention(ad::Tape<T>& tape, ad::Var xq, ad::Var xl, ad::Var theta, ad::Var U, ad::Var A,
                              ad::Var beta, const ad::Tensor<T>& BQ, const ad::Tensor<T>& BV,
                              const FieldAttentionSpec& spec) {
  using ad::Tensor;
  const Tensor<T>& q = tape.value(xq);
  const Tensor<T>& l = tape.value(xl);
  const std::size_t nQ = q.rows, M = l.rows, H = spec.heads;
  const std::size_t dQ = 2 * BQ.rows, dV = 2 * BV.rows;
  require(q.cols == 2 && l.cols == 2, "field_cross_attention: positions must have two columns");
  require(M >= 1, "field_cross_attention: no latents");
  require(tape.value(theta).rows == M && tape.value(theta).cols == 1, "field_cross_attention: theta shape");
  require(tape.value(U).rows == M && tape.value(U).cols == H * dQ, "field_cross_attention: U shape");
  require(tape.value(A).rows == M && tape.value(A).cols == H * 2 * dV, "field_cross_attention: A shape");
  require(tape.value(beta).rows == M && tape.value(beta).cols == H * 2, "field_cross_attention: beta shape");

  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dQ));
  const T inv_two_s2 = static_cast<T>(1.0 / (2.0 * spec.sigma * spec.sigma));
  const Tensor<T>& th = tape.value(theta);
  const Tensor<T>& Uv = tape.value(U);
  const Tensor<T>& Av = tape.value(A);
  const Tensor<T>& Bv = tape.value(beta);

  auto attribute = [&spec](T qx, T qy, T lx, T ly, T t, T& bx, T& by) {
    switch (spec.attribute) {
      case PairAttribute::se2_frame: {
        const T dx = qx - lx, dy = qy - ly, c = std::cos(t), s = std::sin(t);
        bx = c * dx + s * dy;
        by = -s * dx + c * dy;
        break;
      }
      case PairAttribute::relative:
        bx = qx - lx;
        by = qy - ly;
        break;
      case PairAttribute::sum:
        bx = qx + lx;
        by = qy + ly;
        break;
    }
  };

  // Saved for backward: features per (query, latent), weights and local
  // vectors per (query, head, latent).
  std::vector<T> fQ(nQ * M * dQ), fV(nQ * M * dV), alpha(nQ * H * M), local(nQ * H * M * 2);
  Tensor<T> out(nQ, 2);
  std::vector<T> logits(H * M);
  for (std::size_t i = 0; i < nQ; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      T bx, by;
      attribute(q(i, 0), q(i, 1), l(j, 0), l(j, 1), th.data[j], bx, by);
      T* fq = &fQ[(i * M + j) * dQ];
      T* fv = &fV[(i * M + j) * dV];
      detail::rff(BQ, bx, by, fq);
      detail::rff(BV, bx, by, fv);
      const T dx = q(i, 0) - l(j, 0), dy = q(i, 1) - l(j, 1);
      const T win = -(dx * dx + dy * dy) * inv_two_s2;
      for (std::size_t h = 0; h < H; ++h) {
        const T* u = Uv.row(j) + h * dQ;
        T s = 0;
        for (std::size_t k = 0; k < dQ; ++k) s += u[k] * fq[k];
        logits[h * M + j] = s * inv_sqrt + win;
        const T* a = Av.row(j) + h * 2 * dV;
        T l0 = Bv(j, 2 * h), l1 = Bv(j, 2 * h + 1);
        for (std::size_t k = 0; k < dV; ++k) {
          l0 += a[k] * fv[k];
          l1 += a[dV + k] * fv[k];
        }
        T* lo = &local[((i * H + h) * M + j) * 2];
        lo[0] = l0;
        lo[1] = l1;
      }
    }
    T ox = 0, oy = 0;
    for (std::size_t h = 0; h < H; ++h) {
      T mx = logits[h * M];
      for (std::size_t j = 1; j < M; ++j) mx = std::max(mx, logits[h * M + j]);
      T z = 0;
      T* al = &alpha[(i * H + h) * M];
      for (std::size_t j = 0; j < M; ++j) z += (al[j] = std::exp(logits[h * M + j] - mx));
      for (std::size_t j = 0; j < M; ++j) {
        al[j] /= z;
        const T* lo = &local[((i * H + h) * M + j) * 2];
        T rx = lo[0], ry = lo[1];
        if (spec.rotate_output) {
          const T c = std::cos(th.data[j]), s = std::sin(th.data[j]);
          rx = c * lo[0] - s * lo[1];
          ry = s * lo[0] + c * lo[1];
        }
        ox += al[j] * rx;
        oy += al[j] * ry;
      }
    }
    out(i, 0) = ox;
    out(i, 1) = oy;
  }

  ad::Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(
      std::move(out), {xq, xl, theta, U, A, beta},
      [&tape, xq, xl, theta, U, A, beta, o, &BQ, &BV, spec, nQ, M, H, dQ, dV, inv_sqrt, inv_two_s2,
       fQ = std::move(fQ), fV = std::move(fV), alpha = std::move(alpha), local = std::move(local)] {
        const Tensor<T>& go = tape.grad(o);
        const Tensor<T>& q = tape.value(xq);
        const Tensor<T>& l = tape.value(xl);
        const Tensor<T>& th = tape.value(theta);
        const Tensor<T>& Uv = tape.value(U);
        const Tensor<T>& Av = tape.value(A);
        Tensor<T>* gq = tape.grad_buffer(xq);
        Tensor<T>* gl = tape.grad_buffer(xl);
        Tensor<T>* gth = tape.grad_buffer(theta);
        Tensor<T>* gU = tape.grad_buffer(U);
        Tensor<T>* gA = tape.grad_buffer(A);
        Tensor<T>* gB = tape.grad_buffer(beta);
        const bool need_geom = gq || gl || gth;
        const std::size_t nq = dQ / 2, nv = dV / 2;
        std::vector<T> dalpha(M), gfq(dQ), gfv(dV), gwin(M);
        std::vector<T> gfq_all, gfv_all;
        if (need_geom) {
          gfq_all.assign(M * dQ, T(0));
          gfv_all.assign(M * dV, T(0));
        }
        std::vector<T> cth(M), sth(M);
        for (std::size_t j = 0; j < M; ++j) {
          cth[j] = std::cos(th.data[j]);
          sth[j] = std::sin(th.data[j]);
        }
        for (std::size_t i = 0; i < nQ; ++i) {
          const T gx = go(i, 0), gy = go(i, 1);
          if (gx == T(0) && gy == T(0)) continue;
          if (need_geom) {
            std::fill(gfq_all.begin(), gfq_all.end(), T(0));
            std::fill(gfv_all.begin(), gfv_all.end(), T(0));
            std::fill(gwin.begin(), gwin.end(), T(0));
          }
          for (std::size_t h = 0; h < H; ++h) {
            const T* al = &alpha[(i * H + h) * M];
            T dot = 0;
            for (std::size_t j = 0; j < M; ++j) {
              const T* lo = &local[((i * H + h) * M + j) * 2];
              T rx = lo[0], ry = lo[1];
              T glx = gx, gly = gy;  // gradient wrt the local vector, before alpha
              if (spec.rotate_output) {
                rx = cth[j] * lo[0] - sth[j] * lo[1];
                ry = sth[j] * lo[0] + cth[j] * lo[1];
                glx = cth[j] * gx + sth[j] * gy;
                gly = -sth[j] * gx + cth[j] * gy;
                if (gth) gth->data[j] += al[j] * (-gx * ry + gy * rx);
              }
              dalpha[j] = gx * rx + gy * ry;
              dot += al[j] * dalpha[j];
              glx *= al[j];
              gly *= al[j];
              const T* fv = &fV[(i * M + j) * dV];
              if (gA) {
                T* ga = gA->row(j) + h * 2 * dV;
                for (std::size_t k = 0; k < dV; ++k) {
                  ga[k] += glx * fv[k];
                  ga[dV + k] += gly * fv[k];
                }
              }
              if (gB) {
                (*gB)(j, 2 * h) += glx;
                (*gB)(j, 2 * h + 1) += gly;
              }
              if (need_geom) {
                const T* a = Av.row(j) + h * 2 * dV;
                T* g = &gfv_all[j * dV];
                for (std::size_t k = 0; k < dV; ++k) g[k] += glx * a[k] + gly * a[dV + k];
              }
            }
            for (std::size_t j = 0; j < M; ++j) {
              const T dl = al[j] * (dalpha[j] - dot);
              if (dl == T(0)) continue;
              const T* fq = &fQ[(i * M + j) * dQ];
              if (gU) {
                T* gu = gU->row(j) + h * dQ;
                for (std::size_t k = 0; k < dQ; ++k) gu[k] += dl * inv_sqrt * fq[k];
              }
              if (need_geom) {
                const T* u = Uv.row(j) + h * dQ;
                T* g = &gfq_all[j * dQ];
                for (std::size_t k = 0; k < dQ; ++k) g[k] += dl * inv_sqrt * u[k];
                gwin[j] += dl;
              }
            }
          }
          if (!need_geom) continue;
          for (std::size_t j = 0; j < M; ++j) {
            // Attribute gradient through both random-feature maps.
            T gbx = 0, gby = 0;
            const T* fq = &fQ[(i * M + j) * dQ];
            const T* g1 = &gfq_all[j * dQ];
            for (std::size_t m = 0; m < nq; ++m) {
              const T gs = g1[m] * fq[nq + m] - g1[nq + m] * fq[m];
              gbx += gs * BQ(m, 0);
              gby += gs * BQ(m, 1);
            }
            const T* fv = &fV[(i * M + j) * dV];
            const T* g2 = &gfv_all[j * dV];
            for (std::size_t m = 0; m < nv; ++m) {
              const T gs = g2[m] * fv[nv + m] - g2[nv + m] * fv[m];
              gbx += gs * BV(m, 0);
              gby += gs * BV(m, 1);
            }
            const T dx = q(i, 0) - l(j, 0), dy = q(i, 1) - l(j, 1);
            T gdx = -gwin[j] * dx * T(2) * inv_two_s2;
            T gdy = -gwin[j] * dy * T(2) * inv_two_s2;
            switch (spec.attribute) {
              case PairAttribute::se2_frame: {
                const T c = cth[j], s = sth[j];
                const T bx = c * dx + s * dy, by = -s * dx + c * dy;
                gdx += c * gbx - s * gby;
                gdy += s * gbx + c * gby;
                if (gth) gth->data[j] += gbx * by - gby * bx;
                break;
              }
              case PairAttribute::relative:
                gdx += gbx;
                gdy += gby;
                break;
              case PairAttribute::sum:
                if (gq) {
                  (*gq)(i, 0) += gbx;
                  (*gq)(i, 1) += gby;
                }
                if (gl) {
                  (*gl)(j, 0) += gbx;
                  (*gl)(j, 1) += gby;
                }
                break;
            }
            if (gq) {
              (*gq)(i, 0) += gdx;
              (*gq)(i, 1) += gdy;
            }
            if (gl) {
              (*gl)(j, 0) -= gdx;
              (*gl)(j, 1) -= gdy;
            }
          }
        }
      });
}

/// Random Fourier frequencies with standard deviation 1/length_scale.
template <class T>
ad::Tensor<T> random_frequencies(std::uint64_t seed, std::size_t n, double length_scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / length_scale);
  ad::Tensor<T> B(n, 2);
  for (T& x : B.data) x = static_cast<T>(dist(rng));
  return B;
}

/// Pairwise pose attribute for rows (i = receiver, j = sender), on the tape.
/// Returns the raw 2D part and the orientation part separately.
template <class T>
std::pair<ad::Var, ad::Var> pair_attribute(ad::Tape<T>& tape, PairAttribute kind, ad::Var xi, ad::Var ti, ad::Var xj,
                                           ad::Var tj) {
  using namespace ad;
  switch (kind) {
    case PairAttribute::se2_frame: {
      Var rel = rotate_rows(tape, sub(tape, xj, xi), ti, T(-1));
      Var dth = sub(tape, tj, ti);
      return {rel, concat_cols(tape, {cos(tape, dth), sin(tape, dth)})};
    }
    case PairAttribute::relative:
      return {sub(tape, xj, xi), concat_cols(tape, {cos(tape, ti), sin(tape, ti), cos(tape, tj), sin(tape, tj)})};
    case PairAttribute::sum:
    default: {
      Var s = add(tape, tj, ti);
      return {add(tape, xj, xi), concat_cols(tape, {cos(tape, s), sin(tape, s)})};
    }
  }
}

inline std::size_t orientation_attribute_width(PairAttribute kind) { return kind == PairAttribute::relative ? 4 : 2; }

inline PairAttribute pair_attribute_kind(const ModelConfig& cfg) {
  if (cfg.non_equivariant_attr) return PairAttribute::sum;
  return cfg.group == GroupVariant::se2 ? PairAttribute::se2_frame : PairAttribute::relative;
}

template <class T>
class FieldDecoder {
 public:
  FieldDecoder() = default;
  FieldDecoder(nn::ParamStore<T>& store, nn::Initializer& init, const ModelConfig& cfg)
      : cfg_(cfg.decoder), kind_(pair_attribute_kind(cfg)), rotate_(cfg.group == GroupVariant::se2) {
    cfg_.validate();
    const std::size_t Hd = cfg_.hidden, nh = cfg_.heads;
    const std::uint64_t rff_seed = cfg.init_seed ^ 0x9e3779b97f4a7c15ULL;
    BQ_ = random_frequencies<T>(rff_seed, cfg_.query_rff_features, cfg_.query_rff_scale);
    BV_ = random_frequencies<T>(rff_seed + 1, cfg_.value_rff_features, cfg_.value_rff_scale);
    BS_ = random_frequencies<T>(rff_seed + 2, cfg_.query_rff_features, cfg_.query_rff_scale);
    embed_ = nn::Linear<T>(store, init, "decoder.embed", cfg_.context_width, Hd);
    const std::size_t attr_w = 2 * cfg_.query_rff_features + orientation_attribute_width(kind_);
    for (std::size_t l = 0; l < cfg_.self_attention_layers; ++l) {
      const std::string p = "decoder.self" + std::to_string(l);
      SelfAttention sa;
      sa.norm1 = nn::LayerNorm<T>(store, p + ".norm1", Hd);
      sa.q = nn::Linear<T>(store, init, p + ".q", Hd, Hd);
      sa.k = nn::Linear<T>(store, init, p + ".k", Hd, Hd);
      sa.v = nn::Linear<T>(store, init, p + ".v", Hd, Hd);
      sa.ka = nn::Linear<T>(store, init, p + ".key_attr", attr_w, Hd);
      sa.va = nn::Linear<T>(store, init, p + ".value_attr", attr_w, Hd);
      sa.out = nn::Linear<T>(store, init, p + ".out", Hd, Hd, 0.5);
      sa.norm2 = nn::LayerNorm<T>(store, p + ".norm2", Hd);
      sa.ff = nn::Mlp<T>(store, init, p + ".ff", Hd, {2 * Hd, Hd}, nn::Activation::silu, false, 0.5);
      self_.push_back(std::move(sa));
    }
    head_norm_ = nn::LayerNorm<T>(store, "decoder.head_norm", Hd);
    to_u_ = nn::Linear<T>(store, init, "decoder.query_weights", Hd, nh * 2 * cfg_.query_rff_features);
    to_a_ = nn::Linear<T>(store, init, "decoder.value_map", Hd, nh * 4 * cfg_.value_rff_features, 0.5);
    to_beta_ = nn::Linear<T>(store, init, "decoder.value_offset", Hd, nh * 2, 0.5);
  }

  const DecoderConfig& config() const { return cfg_; }

  /// Zeroes the value head so the field is identically zero.
  void zero_value_head() {
    for (auto* p : {to_a_.weight, to_a_.bias, to_beta_.weight, to_beta_.bias})
      std::fill(p->value.data.begin(), p->value.data.end(), T(0));
  }

  /// Latent features after self-attention, M x hidden.
  ad::Var latent_features(ad::Tape<T>& tape, const LatentVars& z) const {
    using namespace ad;
    const std::size_t M = z.size();
    require(tape.cols(z.contexts) == cfg_.context_width,
            "decode: context width " + std::to_string(tape.cols(z.contexts)) + " does not match the decoder (" +
                std::to_string(cfg_.context_width) + ")");
    require(tape.rows(z.contexts) == M && tape.rows(z.positions) == M && tape.rows(z.orientations) == M,
            "decode: latent arrays disagree on the number of control points");
    Var h = embed_(tape, z.contexts);
    if (self_.empty()) return h;

    std::vector<std::uint32_t> I(M * M), J(M * M);
    for (std::uint32_t i = 0; i < M; ++i)
      for (std::uint32_t j = 0; j < M; ++j) {
        I[i * M + j] = i;
        J[i * M + j] = j;
      }
    Var xi = gather_rows(tape, z.positions, I), xj = gather_rows(tape, z.positions, J);
    Var ti = gather_rows(tape, z.orientations, I), tj = gather_rows(tape, z.orientations, J);
    auto [geo, ori] = pair_attribute<T>(tape, kind_, xi, ti, xj, tj);
    Var phase = matmul(tape, geo, tape.constant(transpose(BS_)));
    Var attr = concat_cols(tape, {sin(tape, phase), cos(tape, phase), ori});
    Var diff = sub(tape, xj, xi);
    Var win = scale(tape, row_sum(tape, square(tape, diff)), static_cast<T>(-1.0 / (2 * cfg_.window_sigma * cfg_.window_sigma)));
    std::vector<Var> wins(cfg_.heads, win);
    Var win_h = cfg_.heads == 1 ? win : concat_cols(tape, wins);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg_.hidden / cfg_.heads));

    for (const auto& sa : self_) {
      Var hn = sa.norm1(tape, h);
      Var qv = gather_rows(tape, sa.q(tape, hn), I);
      Var kv = add(tape, gather_rows(tape, sa.k(tape, hn), J), sa.ka(tape, attr));
      Var vv = add(tape, gather_rows(tape, sa.v(tape, hn), J), sa.va(tape, attr));
      Var logits = add(tape, scale(tape, rowdot_heads(tape, qv, kv, cfg_.heads), inv_sqrt), win_h);
      Var alpha = group_softmax(tape, logits, M);
      Var agg = group_sum(tape, mul_heads(tape, vv, alpha), M);
      h = add(tape, h, sa.out(tape, agg));
      h = add(tape, h, sa.ff(tape, sa.norm2(tape, h)));
    }
    return h;
  }

  /// Velocities at the query positions (Q x 2).
  ad::Var decode(ad::Tape<T>& tape, ad::Var queries, const LatentVars& z) const {
    require(tape.cols(queries) == 2, "decode: queries must be Q x 2");
    require(tape.rows(queries) >= 1, "decode: need at least one query");
    ad::Var h = head_norm_(tape, latent_features(tape, z));
    FieldAttentionSpec spec{cfg_.heads, cfg_.window_sigma, kind_, rotate_};
    return field_cross_attention(tape, queries, z.positions, z.orientations, to_u_(tape, h), to_a_(tape, h),
                                 to_beta_(tape, h), BQ_, BV_, spec);
  }

  std::vector<Vec2<T>> decode(std::span<const Vec2<T>> queries, const LatentState<T>& z) const {
    ad::Tape<T> tape(false);
    ad::Var out = decode(tape, tape.constant(positions_tensor<T>(queries)), latent_constants(tape, z));
    return tensor_points(tape.value(out));
  }

 private:
  struct SelfAttention {
    nn::LayerNorm<T> norm1, norm2;
    nn::Linear<T> q, k, v, ka, va, out;
    nn::Mlp<T> ff;
  };

  static ad::Tensor<T> transpose(const ad::Tensor<T>& a) {
    ad::Tensor<T> t(a.cols, a.rows);
    for (std::size_t r = 0; r < a.rows; ++r)
      for (std::size_t c = 0; c < a.cols; ++c) t(c, r) = a(r, c);
    return t;
  }

  DecoderConfig cfg_;
  PairAttribute kind_ = PairAttribute::se2_frame;
  bool rotate_ = true;
  ad::Tensor<T> BQ_, BV_, BS_;
  nn::Linear<T> embed_;
  std::vector<SelfAttention> self_;
  nn::LayerNorm<T> head_norm_;
  nn::Linear<T> to_u_, to_a_, to_beta_;
};

}  // namespace eqcollide
