#pragma once

#include <cmath>
#include <cstdint>
#include <variant>
#include <vector>

#include "dds/common.hpp"
#include "dds/mlp.hpp"
#include "dds/rng.hpp"

namespace dds::flows {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// --- layers ----------------------------------------------------------------

// Fixed shuffle: y[i] = x[perm[i]]. Log-det 0.
struct Permutation {
  std::vector<int> perm;
};

// Per-dimension affine map y = scale .* x + bias, scale entries nonzero.
// `initialized` gates the one-shot data-dependent initialization.
template <class S>
struct ActNorm {
  Mat<S> scale;  // d x 1
  Mat<S> bias;   // d x 1
  bool initialized = false;
};

// Invertible mixing W = P * L * U with L unit-lower and U upper triangular.
// The diagonal of U is stored as fixed signs and trainable log magnitudes,
// so log|det| = sum(log_diag) exactly.
template <class S>
struct LuMixing {
  std::vector<int> perm;  // y[i] = (L*U*x)[perm[i]]
  Mat<S> l_raw;           // strictly lower part used
  Mat<S> u_raw;           // strictly upper part used
  Mat<S> log_diag;        // d x 1
  Mat<S> diag_sign;       // d x 1, fixed +-1

  Mat<S> lower() const {
    Mat<S> l = l_raw.template triangularView<Eigen::StrictlyLower>();
    l.diagonal().setOnes();
    return l;
  }
  Mat<S> upper() const {
    Mat<S> u = u_raw.template triangularView<Eigen::StrictlyUpper>();
    u.diagonal() = diag_sign.col(0).cwiseProduct(log_diag.col(0).array().exp().matrix());
    return u;
  }
};

// Affine coupling: one half of the dimensions is scaled and shifted by
// functions of the other half. `swap` exchanges the roles of the halves so
// consecutive couplings transform alternating halves. The scale is
// exp(tanh(raw) * scale_bound), keeping per-dimension scaling inside
// [e^-c, e^c] during latent-space optimization.
template <class S>
struct Coupling {
  Mlp<S> mlp;  // cond_size -> 2 * out_size
  bool swap = false;
  S scale_bound = S(2);
  Index d = 0;

  Index lo_size() const { return d / 2; }
  Index cond_size() const { return swap ? d - lo_size() : lo_size(); }
  Index out_size() const { return d - cond_size(); }
};

template <class S>
using Layer = std::variant<Permutation, ActNorm<S>, LuMixing<S>, Coupling<S>>;

// --- model -------------------------------------------------------------------

enum class FlowKind { realnvp_single_source, glow_conditional };

struct FlowArchitecture {
  int steps = 0;
  Index hidden_width = 0;
  int hidden_layers = 0;

  static FlowArchitecture realnvp_default() { return {16, 128, 4}; }
  static FlowArchitecture glow_default() { return {32, 1024, 3}; }
};

template <class S>
struct FlowModel {
  FlowKind kind = FlowKind::realnvp_single_source;
  Index d = 0;
  Index k_semantic = 0;  // 0 for the single-source kind
  std::vector<Layer<S>> layers;
};

template <class S>
Coupling<S> make_coupling(Index d, bool swap, const FlowArchitecture& arch,
                          Activation act, Rng& rng) {
  Coupling<S> c;
  c.d = d;
  c.swap = swap;
  c.mlp = make_mlp<S>(swap ? d - d / 2 : d / 2,
                      2 * (swap ? d / 2 : d - d / 2), arch.hidden_width,
                      arch.hidden_layers, act, rng);
  return c;
}

// Identity-initialized RealNVP: `steps` pairs of (fixed random permutation,
// affine coupling with zeroed final MLP layer).
template <class S>
FlowModel<S> make_realnvp(Index d, const FlowArchitecture& arch,
                          std::uint64_t seed) {
  if (d < 2) throw error("flow dimension must be >= 2");
  FlowModel<S> m;
  m.kind = FlowKind::realnvp_single_source;
  m.d = d;
  m.k_semantic = 0;
  Rng rng(mix_seed({seed, 0x7ea1u, std::uint64_t(d)}));
  for (int s = 0; s < arch.steps; ++s) {
    Permutation p;
    p.perm = rng.permutation(int(d));
    m.layers.emplace_back(std::move(p));
    m.layers.emplace_back(
        make_coupling<S>(d, s % 2 == 1, arch, Activation::selu, rng));
  }
  return m;
}

// Identity-initialized conditional Glow: `steps` triples of (actnorm,
// LU mixing, affine coupling). Starts as the exact identity map; actnorm
// statistics come later from the first training batch.
template <class S>
FlowModel<S> make_glow(Index d, Index k_semantic, const FlowArchitecture& arch,
                       std::uint64_t seed) {
  if (d < 2) throw error("flow dimension must be >= 2");
  if (k_semantic < 0 || k_semantic >= d)
    throw error("k_semantic must be in [0, d)");
  FlowModel<S> m;
  m.kind = FlowKind::glow_conditional;
  m.d = d;
  m.k_semantic = k_semantic;
  Rng rng(mix_seed({seed, 0x910fu, std::uint64_t(d)}));
  for (int s = 0; s < arch.steps; ++s) {
    ActNorm<S> a;
    a.scale = Mat<S>::Ones(d, 1);
    a.bias = Mat<S>::Zero(d, 1);
    m.layers.emplace_back(std::move(a));
    LuMixing<S> lu;
    lu.perm.resize(std::size_t(d));
    for (Index i = 0; i < d; ++i) lu.perm[std::size_t(i)] = int(i);
    lu.l_raw = Mat<S>::Zero(d, d);
    lu.u_raw = Mat<S>::Zero(d, d);
    lu.log_diag = Mat<S>::Zero(d, 1);
    lu.diag_sign = Mat<S>::Ones(d, 1);
    m.layers.emplace_back(std::move(lu));
    m.layers.emplace_back(
        make_coupling<S>(d, s % 2 == 1, arch, Activation::leaky_relu, rng));
  }
  return m;
}

// --- parameter enumeration ---------------------------------------------------

// Canonical parameter order: layers in model order; within a coupling the
// MLP layers in order (w then b); actnorm scale then bias; LU l_raw, u_raw,
// log_diag. Gradients and optimizer state use the same order.
template <class S>
std::vector<Mat<S>*> collect_params(FlowModel<S>& m) {
  std::vector<Mat<S>*> out;
  for (Layer<S>& layer : m.layers) {
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Coupling<S>>) {
            for (Dense<S>& dl : l.mlp.layers) {
              out.push_back(&dl.w);
              out.push_back(&dl.b);
            }
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            out.push_back(&l.scale);
            out.push_back(&l.bias);
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            out.push_back(&l.l_raw);
            out.push_back(&l.u_raw);
            out.push_back(&l.log_diag);
          }
        },
        layer);
  }
  return out;
}

template <class S>
std::vector<Mat<S>> make_grads(FlowModel<S>& m) {
  std::vector<Mat<S>> g;
  for (Mat<S>* p : collect_params(m)) g.push_back(Mat<S>::Zero(p->rows(), p->cols()));
  return g;
}

// First grad-tensor index of each layer, in model order.
template <class S>
std::vector<std::size_t> param_offsets(const FlowModel<S>& m) {
  std::vector<std::size_t> offs;
  std::size_t cur = 0;
  for (const Layer<S>& layer : m.layers) {
    offs.push_back(cur);
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Coupling<S>>)
            cur += 2 * l.mlp.layers.size();
          else if constexpr (std::is_same_v<T, ActNorm<S>>)
            cur += 2;
          else if constexpr (std::is_same_v<T, LuMixing<S>>)
            cur += 3;
        },
        layer);
  }
  return offs;
}

// --- pass caches -------------------------------------------------------------

template <class S>
struct CouplingCache {
  MlpCache<S> mlp;
  Mat<S> x_out;  // the transformed half, in data space
  Mat<S> th;     // tanh(raw scale)
  Mat<S> s;      // exp(scale_bound * th)
};

template <class S>
struct ActNormCache {
  Mat<S> x;
};

template <class S>
struct LuCache {
  Mat<S> x;
  Mat<S> ux;
};

template <class S>
using LayerCache =
    std::variant<std::monostate, CouplingCache<S>, ActNormCache<S>, LuCache<S>>;

template <class S>
struct PassCache {
  std::vector<LayerCache<S>> layers;
};

template <class S>
struct FlowPass {
  Mat<S> z;       // forward output (or data-space output for inverse passes)
  Vec<S> logdet;  // per item, of the direction that was run
};

// --- forward -----------------------------------------------------------------

namespace detail {

template <class S>
void coupling_split(const Coupling<S>& c, const Mat<S>& x, Mat<S>& cond,
                    Mat<S>& rest) {
  const Index h = c.lo_size();
  if (!c.swap) {
    cond = x.topRows(h);
    rest = x.bottomRows(c.d - h);
  } else {
    cond = x.bottomRows(c.d - h);
    rest = x.topRows(h);
  }
}

template <class S>
void coupling_join(const Coupling<S>& c, const Mat<S>& cond, const Mat<S>& rest,
                   Mat<S>& out) {
  const Index h = c.lo_size();
  out.resize(c.d, cond.cols());
  if (!c.swap) {
    out.topRows(h) = cond;
    out.bottomRows(c.d - h) = rest;
  } else {
    out.bottomRows(c.d - h) = cond;
    out.topRows(h) = rest;
  }
}

}  // namespace detail

template <class S>
FlowPass<S> forward(const FlowModel<S>& m, const Mat<S>& x,
                    PassCache<S>* cache = nullptr) {
  if (x.rows() != m.d) throw error("flow input dimension mismatch");
  if (!all_finite(x)) throw numeric_error("numerical overflow in flow");
  const Index nb = x.cols();
  FlowPass<S> r;
  r.z = x;
  r.logdet = Vec<S>::Zero(nb);
  if (cache) cache->layers.assign(m.layers.size(), std::monostate{});

  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Permutation>) {
            Mat<S> y(r.z.rows(), nb);
            for (Index i = 0; i < r.z.rows(); ++i)
              y.row(i) = r.z.row(l.perm[std::size_t(i)]);
            r.z = std::move(y);
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            if (cache) cache->layers[li] = ActNormCache<S>{r.z};
            r.z = (r.z.array().colwise() * l.scale.col(0).array()).matrix();
            r.z.colwise() += l.bias.col(0);
            r.logdet.array() += l.scale.col(0).array().abs().log().sum();
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            LuCache<S> lc;
            if (cache) lc.x = r.z;
            Mat<S> ux = l.upper() * r.z;
            Mat<S> lux = l.lower() * ux;
            if (cache) {
              lc.ux = std::move(ux);
              cache->layers[li] = std::move(lc);
            }
            Mat<S> y(r.z.rows(), nb);
            for (Index i = 0; i < r.z.rows(); ++i)
              y.row(i) = lux.row(l.perm[std::size_t(i)]);
            r.z = std::move(y);
            r.logdet.array() += l.log_diag.sum();
          } else if constexpr (std::is_same_v<T, Coupling<S>>) {
            Mat<S> cond, rest;
            detail::coupling_split(l, r.z, cond, rest);
            CouplingCache<S> cc;
            const Mat<S> mo = l.mlp.forward(cond, cache ? &cc.mlp : nullptr);
            const Index ob = l.out_size();
            cc.th = mo.topRows(ob).array().tanh().matrix();
            cc.s = (cc.th.array() * l.scale_bound).exp().matrix();
            Mat<S> yout =
                rest.cwiseProduct(cc.s) + mo.bottomRows(ob);
            r.logdet += (cc.th.colwise().sum() * l.scale_bound).transpose();
            if (cache) {
              cc.x_out = std::move(rest);
              cache->layers[li] = std::move(cc);
            }
            detail::coupling_join(l, cond, yout, r.z);
          }
        },
        m.layers[li]);
  }
  if (!all_finite(r.z) || !all_finite(r.logdet))
    throw numeric_error("numerical overflow in flow");
  return r;
}

// Reverse-mode pass for the forward direction. gz / glogdet are cotangents
// of z and logdet; either grads or gx may be null.
template <class S>
void backward(const FlowModel<S>& m, const PassCache<S>& cache,
              const Mat<S>& gz_in, const Vec<S>& glogdet,
              std::vector<Mat<S>>* grads, Mat<S>* gx_out) {
  Mat<S> g = gz_in;
  const std::vector<std::size_t> offs = param_offsets(m);
  for (std::size_t li = m.layers.size(); li-- > 0;) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Permutation>) {
            Mat<S> gx(g.rows(), g.cols());
            for (Index i = 0; i < g.rows(); ++i)
              gx.row(l.perm[std::size_t(i)]) = g.row(i);
            g = std::move(gx);
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            const auto& ac = std::get<ActNormCache<S>>(cache.layers[li]);
            if (grads) {
              (*grads)[offs[li]].col(0) +=
                  g.cwiseProduct(ac.x).rowwise().sum() +
                  glogdet.sum() * l.scale.col(0).cwiseInverse();
              (*grads)[offs[li] + 1].col(0) += g.rowwise().sum();
            }
            g = (g.array().colwise() * l.scale.col(0).array()).matrix();
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            const auto& lc = std::get<LuCache<S>>(cache.layers[li]);
            Mat<S> g_lux(g.rows(), g.cols());
            for (Index i = 0; i < g.rows(); ++i)
              g_lux.row(l.perm[std::size_t(i)]) = g.row(i);
            const Mat<S> lmat = l.lower();
            const Mat<S> umat = l.upper();
            Mat<S> g_ux = lmat.transpose() * g_lux;
            if (grads) {
              Mat<S> gl = g_lux * lc.ux.transpose();
              (*grads)[offs[li]] +=
                  Mat<S>(gl.template triangularView<Eigen::StrictlyLower>());
              Mat<S> gu = g_ux * lc.x.transpose();
              (*grads)[offs[li] + 1] +=
                  Mat<S>(gu.template triangularView<Eigen::StrictlyUpper>());
              (*grads)[offs[li] + 2].col(0) +=
                  gu.diagonal().cwiseProduct(umat.diagonal()) +
                  Vec<S>::Constant(g.rows(), glogdet.sum());
            }
            g = umat.transpose() * g_ux;
          } else if constexpr (std::is_same_v<T, Coupling<S>>) {
            const auto& cc = std::get<CouplingCache<S>>(cache.layers[li]);
            Mat<S> g_cond, g_out;
            detail::coupling_split(l, g, g_cond, g_out);
            const Index ob = l.out_size();
            Mat<S> gmo(2 * ob, g.cols());
            // d(logdet)/d(raw) = c*(1 - th^2); d(y_out)/d(raw) adds
            // x_out*s*c*(1 - th^2).
            Mat<S> dth = (S(1) - cc.th.array().square()).matrix() * l.scale_bound;
            gmo.topRows(ob) =
                (g_out.cwiseProduct(cc.x_out).cwiseProduct(cc.s) +
                 (Mat<S>::Ones(ob, 1) * glogdet.transpose()))
                    .cwiseProduct(dth);
            gmo.bottomRows(ob) = g_out;
            MlpGrads<S> mg;
            MlpGrads<S>* mgp = nullptr;
            if (grads) {
              mg = make_mlp_grads(l.mlp);
              mgp = &mg;
            }
            Mat<S> g_cond_extra = l.mlp.backward(cc.mlp, gmo, mgp);
            if (grads) {
              for (std::size_t dl = 0; dl < mg.size(); ++dl) {
                (*grads)[offs[li] + 2 * dl] += mg[dl].w;
                (*grads)[offs[li] + 2 * dl + 1] += mg[dl].b;
              }
            }
            detail::coupling_join(l, Mat<S>(g_cond + g_cond_extra),
                                  Mat<S>(g_out.cwiseProduct(cc.s)), g);
          }
        },
        m.layers[li]);
  }
  if (gx_out) *gx_out = std::move(g);
}

// --- inverse -----------------------------------------------------------------

template <class S>
FlowPass<S> inverse_with_logdet(const FlowModel<S>& m, const Mat<S>& z,
                                PassCache<S>* cache = nullptr) {
  if (z.rows() != m.d) throw error("flow input dimension mismatch");
  if (!all_finite(z)) throw numeric_error("numerical overflow in flow");
  const Index nb = z.cols();
  FlowPass<S> r;
  r.z = z;
  r.logdet = Vec<S>::Zero(nb);
  if (cache) cache->layers.assign(m.layers.size(), std::monostate{});

  for (std::size_t li = m.layers.size(); li-- > 0;) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Permutation>) {
            Mat<S> x(r.z.rows(), nb);
            for (Index i = 0; i < r.z.rows(); ++i)
              x.row(l.perm[std::size_t(i)]) = r.z.row(i);
            r.z = std::move(x);
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            r.z.colwise() -= l.bias.col(0);
            r.z = (r.z.array().colwise() / l.scale.col(0).array()).matrix();
            r.logdet.array() -= l.scale.col(0).array().abs().log().sum();
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            Mat<S> lux(r.z.rows(), nb);
            for (Index i = 0; i < r.z.rows(); ++i)
              lux.row(l.perm[std::size_t(i)]) = r.z.row(i);
            const Mat<S> lmat = l.lower();
            const Mat<S> umat = l.upper();
            Mat<S> ux = lmat.template triangularView<Eigen::Lower>().solve(lux);
            r.z = umat.template triangularView<Eigen::Upper>().solve(ux);
            r.logdet.array() -= l.log_diag.sum();
          } else if constexpr (std::is_same_v<T, Coupling<S>>) {
            Mat<S> cond, yout;
            detail::coupling_split(l, r.z, cond, yout);
            CouplingCache<S> cc;
            const Mat<S> mo = l.mlp.forward(cond, cache ? &cc.mlp : nullptr);
            const Index ob = l.out_size();
            cc.th = mo.topRows(ob).array().tanh().matrix();
            cc.s = (cc.th.array() * l.scale_bound).exp().matrix();
            Mat<S> xout = (yout - mo.bottomRows(ob)).cwiseQuotient(cc.s);
            r.logdet -= (cc.th.colwise().sum() * l.scale_bound).transpose();
            if (cache) {
              cc.x_out = xout;
              cache->layers[li] = std::move(cc);
            }
            detail::coupling_join(l, cond, xout, r.z);
          }
        },
        m.layers[li]);
  }
  if (!all_finite(r.z) || !all_finite(r.logdet))
    throw numeric_error("numerical overflow in flow");
  return r;
}

template <class S>
Mat<S> inverse(const FlowModel<S>& m, const Mat<S>& z) {
  return inverse_with_logdet(m, z).z;
}

// Reverse-mode pass for the inverse direction, with respect to the latent
// input only (the parameters stay fixed during dictionary search).
// gx / glogdet are cotangents of the data-space output and the inverse
// pass's logdet.
template <class S>
Mat<S> inverse_vjp(const FlowModel<S>& m, const PassCache<S>& cache,
                   const Mat<S>& gx_in, const Vec<S>& glogdet) {
  Mat<S> g = gx_in;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Permutation>) {
            // x[perm[i]] = z[i]  =>  gz[i] = gx[perm[i]]
            Mat<S> gz(g.rows(), g.cols());
            for (Index i = 0; i < g.rows(); ++i)
              gz.row(i) = g.row(l.perm[std::size_t(i)]);
            g = std::move(gz);
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            g = (g.array().colwise() / l.scale.col(0).array()).matrix();
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            // x = U^-1 L^-1 P^T z  =>  gz = P L^-T U^-T gx
            const Mat<S> lmat = l.lower();
            const Mat<S> umat = l.upper();
            Mat<S> t1 = umat.transpose()
                            .template triangularView<Eigen::Lower>()
                            .solve(g);
            Mat<S> t2 = lmat.transpose()
                            .template triangularView<Eigen::Upper>()
                            .solve(t1);
            Mat<S> gz(g.rows(), g.cols());
            for (Index i = 0; i < g.rows(); ++i)
              gz.row(i) = t2.row(l.perm[std::size_t(i)]);
            g = std::move(gz);
          } else if constexpr (std::is_same_v<T, Coupling<S>>) {
            const auto& cc = std::get<CouplingCache<S>>(cache.layers[li]);
            Mat<S> g_cond, g_out;
            detail::coupling_split(l, g, g_cond, g_out);
            const Index ob = l.out_size();
            // x_out = (y_out - t(cond)) / s(cond); logdet_inv = -c*sum th.
            Mat<S> dth = (S(1) - cc.th.array().square()).matrix() * l.scale_bound;
            Mat<S> gmo(2 * ob, g.cols());
            gmo.topRows(ob) =
                (-(g_out.cwiseProduct(cc.x_out)) -
                 (Mat<S>::Ones(ob, 1) * glogdet.transpose()))
                    .cwiseProduct(dth);
            gmo.bottomRows(ob) = -g_out.cwiseQuotient(cc.s);
            Mat<S> g_cond_extra = l.mlp.backward(cc.mlp, gmo, nullptr);
            detail::coupling_join(l, Mat<S>(g_cond + g_cond_extra),
                                  Mat<S>(g_out.cwiseQuotient(cc.s)), g);
          }
        },
        m.layers[li]);
  }
  return g;
}

// --- densities ---------------------------------------------------------------

// Exact negative log density under a standard-normal prior on all latent
// dimensions (single-source models).
template <class S>
Vec<S> nll(const FlowModel<S>& m, const Mat<S>& x,
           FlowPass<S>* pass_out = nullptr, PassCache<S>* cache = nullptr) {
  if (m.kind != FlowKind::realnvp_single_source)
    throw error("nll: model is not a single-source density");
  FlowPass<S> p = forward(m, x, cache);
  Vec<S> out = S(0.5) * p.z.colwise().squaredNorm().transpose() - p.logdet;
  out.array() += S(0.5 * kLog2Pi) * S(double(m.d));
  if (pass_out) *pass_out = std::move(p);
  return out;
}

template <class S>
struct ConditionalLossParts {
  Vec<S> loss;
  Vec<S> semantic_mse;
  Vec<S> nuisance_nll;
};

// Two-term conditional objective: mean squared error between the semantic
// latent block and the one-hot source label, plus an exact change-of-variables
// negative log likelihood on the nuisance block.
template <class S>
ConditionalLossParts<S> conditional_loss(const FlowModel<S>& m, const Mat<S>& x,
                                         const std::vector<int>& labels,
                                         S alpha = S(-1),
                                         FlowPass<S>* pass_out = nullptr,
                                         PassCache<S>* cache = nullptr) {
  if (m.kind != FlowKind::glow_conditional)
    throw error("conditional_loss: model is not conditional");
  if (Index(labels.size()) != x.cols())
    throw error("conditional_loss: one label per item required");
  const Index k = m.k_semantic;
  if (alpha < S(0)) alpha = S(double(k));
  for (int lb : labels)
    if (lb < 0 || lb >= k) throw error("unknown source");

  FlowPass<S> p = forward(m, x, cache);
  ConditionalLossParts<S> r;
  const Index nb = x.cols();
  r.semantic_mse.resize(nb);
  r.nuisance_nll.resize(nb);
  for (Index i = 0; i < nb; ++i) {
    Vec<S> zs = p.z.col(i).head(k);
    zs(labels[std::size_t(i)]) -= S(1);
    r.semantic_mse(i) = zs.squaredNorm() / S(double(k));
    r.nuisance_nll(i) = S(0.5) * p.z.col(i).tail(m.d - k).squaredNorm() -
                        p.logdet(i) + S(0.5 * kLog2Pi) * S(double(m.d - k));
  }
  r.loss = alpha * r.semantic_mse + r.nuisance_nll;
  if (pass_out) *pass_out = std::move(p);
  return r;
}

// Dictionary entries for given labels: inverse of (onehot(label), z_n).
template <class S>
Mat<S> generate_conditional(const FlowModel<S>& m, const std::vector<int>& labels,
                            const Mat<S>& z_nuisance) {
  if (m.kind != FlowKind::glow_conditional)
    throw error("generate_conditional: model is not conditional");
  if (Index(labels.size()) != z_nuisance.cols())
    throw error("generate_conditional: one label per code required");
  if (z_nuisance.rows() != m.d - m.k_semantic)
    throw error("generate_conditional: nuisance dimension mismatch");
  Mat<S> z = Mat<S>::Zero(m.d, z_nuisance.cols());
  for (Index i = 0; i < z.cols(); ++i) {
    const int lb = labels[std::size_t(i)];
    if (lb < 0 || lb >= m.k_semantic) throw error("unknown source");
    z(lb, i) = S(1);
  }
  z.bottomRows(m.d - m.k_semantic) = z_nuisance;
  return inverse(m, z);
}

// Data-dependent actnorm initialization: after it, each actnorm layer's
// output on this batch has per-dimension mean 0 and (population) std 1.
template <class S>
void init_actnorm(FlowModel<S>& m, const Mat<S>& batch) {
  if (batch.cols() < 2) throw error("init_actnorm: batch size must be >= 2");
  Mat<S> h = batch;
  const Index nb = batch.cols();
  for (Layer<S>& layer : m.layers) {
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Permutation>) {
            Mat<S> y(h.rows(), nb);
            for (Index i = 0; i < h.rows(); ++i)
              y.row(i) = h.row(l.perm[std::size_t(i)]);
            h = std::move(y);
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            if (l.initialized)
              throw error("init_actnorm: layer already initialized");
            Vec<S> mean = h.rowwise().mean();
            Vec<S> var =
                (h.colwise() - mean).array().square().rowwise().sum() /
                S(double(nb));
            for (Index i = 0; i < var.size(); ++i)
              if (!(var(i) > S(0)))
                throw numeric_error("degenerate batch dimension");
            Vec<S> sd = var.array().sqrt();
            l.scale.col(0) = sd.cwiseInverse();
            l.bias.col(0) = -mean.cwiseQuotient(sd);
            l.initialized = true;
            h = (h.array().colwise() * l.scale.col(0).array()).matrix();
            h.colwise() += l.bias.col(0);
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            Mat<S> lux = l.lower() * (l.upper() * h);
            Mat<S> y(h.rows(), nb);
            for (Index i = 0; i < h.rows(); ++i)
              y.row(i) = lux.row(l.perm[std::size_t(i)]);
            h = std::move(y);
          } else if constexpr (std::is_same_v<T, Coupling<S>>) {
            Mat<S> cond, rest;
            detail::coupling_split(l, h, cond, rest);
            const Mat<S> mo = l.mlp.forward(cond);
            const Index ob = l.out_size();
            Mat<S> s =
                (mo.topRows(ob).array().tanh() * l.scale_bound).exp().matrix();
            Mat<S> yout = rest.cwiseProduct(s) + mo.bottomRows(ob);
            detail::coupling_join(l, cond, yout, h);
          }
        },
        layer);
  }
}

// Test helper doubling as a generic perturbation: draws every trainable
// tensor from a small seeded normal so round-trip and log-det checks run on
// non-identity maps.
template <class S>
void randomize_parameters(FlowModel<S>& m, std::uint64_t seed, double scale = 0.5) {
  Rng rng(mix_seed({seed, 0xabcdu}));
  for (Layer<S>& layer : m.layers) {
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Coupling<S>>) {
            for (Dense<S>& dl : l.mlp.layers) {
              const double sd = scale / std::sqrt(double(dl.w.cols()));
              for (Index i = 0; i < dl.w.size(); ++i)
                dl.w.data()[i] = S(rng.normal() * sd);
              for (Index i = 0; i < dl.b.size(); ++i)
                dl.b.data()[i] = S(rng.normal() * 0.1 * scale);
            }
          } else if constexpr (std::is_same_v<T, ActNorm<S>>) {
            for (Index i = 0; i < l.scale.size(); ++i)
              l.scale(i, 0) = S(std::exp(rng.normal() * 0.2 * scale));
            for (Index i = 0; i < l.bias.size(); ++i)
              l.bias(i, 0) = S(rng.normal() * 0.2 * scale);
            l.initialized = true;
          } else if constexpr (std::is_same_v<T, LuMixing<S>>) {
            const double sd = scale / std::sqrt(double(l.l_raw.rows()));
            for (Index i = 0; i < l.l_raw.size(); ++i)
              l.l_raw.data()[i] = S(rng.normal() * sd);
            for (Index i = 0; i < l.u_raw.size(); ++i)
              l.u_raw.data()[i] = S(rng.normal() * sd);
            for (Index i = 0; i < l.log_diag.size(); ++i)
              l.log_diag(i, 0) = S(rng.normal() * 0.2 * scale);
          }
        },
        layer);
  }
}

}  // namespace dds::flows
