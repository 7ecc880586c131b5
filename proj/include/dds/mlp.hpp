#pragma once

#include <cmath>
#include <vector>

#include "dds/common.hpp"
#include "dds/rng.hpp"

namespace dds::flows {

enum class Activation { selu, leaky_relu, identity };

inline constexpr double kSeluLambda = 1.0507009873554804934193349852946;
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kLeakySlope = 0.2;

template <class S>
void apply_activation(Activation act, Mat<S>& u) {
  switch (act) {
    case Activation::selu:
      u = u.array()
              .unaryExpr([](S x) {
                return x > S(0) ? S(kSeluLambda) * x
                                : S(kSeluLambda * kSeluAlpha) * (std::exp(x) - S(1));
              })
              .matrix();
      break;
    case Activation::leaky_relu:
      u = u.array()
              .unaryExpr([](S x) { return x > S(0) ? x : S(kLeakySlope) * x; })
              .matrix();
      break;
    case Activation::identity:
      break;
  }
}

template <class S>
Mat<S> activation_grad(Activation act, const Mat<S>& preact) {
  switch (act) {
    case Activation::selu:
      return preact.array()
          .unaryExpr([](S x) {
            return x > S(0) ? S(kSeluLambda)
                            : S(kSeluLambda * kSeluAlpha) * std::exp(x);
          })
          .matrix();
    case Activation::leaky_relu:
      return preact.array()
          .unaryExpr([](S x) { return x > S(0) ? S(1) : S(kLeakySlope); })
          .matrix();
    case Activation::identity:
      return Mat<S>::Ones(preact.rows(), preact.cols());
  }
  return Mat<S>();
}

// One dense layer; bias kept as a column matrix so every trainable tensor
// is a Mat and optimizers can treat parameters uniformly.
template <class S>
struct Dense {
  Mat<S> w;  // out x in
  Mat<S> b;  // out x 1
};

template <class S>
struct MlpCache {
  std::vector<Mat<S>> inputs;   // input to each dense layer
  std::vector<Mat<S>> preacts;  // pre-activation of each hidden layer
};

template <class S>
using MlpGrads = std::vector<Dense<S>>;

// Plain MLP, activation after every layer except the last. Batch items are
// columns throughout.
template <class S>
struct Mlp {
  std::vector<Dense<S>> layers;
  Activation act = Activation::selu;

  Index in_dim() const { return layers.front().w.cols(); }
  Index out_dim() const { return layers.back().w.rows(); }

  Mat<S> forward(const Mat<S>& x, MlpCache<S>* cache = nullptr) const {
    Mat<S> h = x;
    if (cache) {
      cache->inputs.clear();
      cache->preacts.clear();
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (cache) cache->inputs.push_back(h);
      Mat<S> u = layers[l].w * h;
      u.colwise() += layers[l].b.col(0);
      if (l + 1 < layers.size()) {
        if (cache) cache->preacts.push_back(u);
        apply_activation(act, u);
      }
      h = std::move(u);
    }
    return h;
  }

  // Reverse pass. grads may be null when only the input gradient is needed
  // (dictionary search holds the parameters fixed).
  Mat<S> backward(const MlpCache<S>& cache, const Mat<S>& gy,
                  MlpGrads<S>* grads) const {
    Mat<S> g = gy;
    for (std::size_t l = layers.size(); l-- > 0;) {
      if (grads) {
        (*grads)[l].w.noalias() += g * cache.inputs[l].transpose();
        (*grads)[l].b.col(0) += g.rowwise().sum();
      }
      Mat<S> gx = layers[l].w.transpose() * g;
      if (l > 0)
        g = gx.cwiseProduct(activation_grad(act, cache.preacts[l - 1]));
      else
        g = std::move(gx);
    }
    return g;
  }
};

template <class S>
MlpGrads<S> make_mlp_grads(const Mlp<S>& mlp) {
  MlpGrads<S> g;
  g.reserve(mlp.layers.size());
  for (const Dense<S>& d : mlp.layers)
    g.push_back({Mat<S>::Zero(d.w.rows(), d.w.cols()),
                 Mat<S>::Zero(d.b.rows(), 1)});
  return g;
}

// LeCun-normal hidden layers; the final projection is zero-initialized so a
// fresh coupling starts as the identity map.
template <class S>
Mlp<S> make_mlp(Index in, Index out, Index hidden_width, int hidden_layers,
                Activation act, Rng& rng) {
  Mlp<S> mlp;
  mlp.act = act;
  Index prev = in;
  for (int l = 0; l < hidden_layers; ++l) {
    Dense<S> d;
    d.w.resize(hidden_width, prev);
    const double sd = std::sqrt(1.0 / double(prev));
    for (Index i = 0; i < d.w.size(); ++i) d.w.data()[i] = S(rng.normal() * sd);
    d.b = Mat<S>::Zero(hidden_width, 1);
    mlp.layers.push_back(std::move(d));
    prev = hidden_width;
  }
  Dense<S> fin;
  fin.w = Mat<S>::Zero(out, prev);
  fin.b = Mat<S>::Zero(out, 1);
  mlp.layers.push_back(std::move(fin));
  return mlp;
}

}  // namespace dds::flows
