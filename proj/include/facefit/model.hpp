#pragma once

// Morphable-model containers: linear PCA models, the decoder interface used
// by fitting, and the bundled decoder implementations.

#include <cmath>
#include <memory>
#include <random>
#include <string>

#include <Eigen/Core>

#include "facefit/grid.hpp"
#include "facefit/mesh.hpp"
#include "facefit/render.hpp"

namespace facefit {

// mean + bases * params. Shape: S = S_mean + G alpha; albedo: A = A_mean + R beta.
struct LinearModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd bases;  // rows = mean.size(), cols = param_dim

  int param_dim() const { return static_cast<int>(bases.cols()); }
  int output_dim() const { return static_cast<int>(mean.size()); }

  void check() const {
    if (bases.rows() != mean.size())
      throw shape_error("linear model: bases have " + std::to_string(bases.rows()) +
                        " rows but mean has " + std::to_string(mean.size()) + " entries");
  }

  // First k basis columns.
  LinearModel truncated(int k) const {
    if (k < 0 || k > param_dim()) throw domain_error("truncated: bad dimension");
    return {mean, bases.leftCols(k)};
  }
};

inline Eigen::VectorXd linear_decode(const LinearModel& model,
                                     const Eigen::VectorXd& params) {
  model.check();
  if (params.size() != model.param_dim())
    throw shape_error("linear_decode: expected " + std::to_string(model.param_dim()) +
                      " parameters, got " + std::to_string(params.size()));
  return model.mean + model.bases * params;
}

// Maps a parameter vector to a flat output (vertex vector or UV grid data).
// Fitting never modifies a decoder; only parameter vectors are optimized.
class Decoder {
 public:
  virtual ~Decoder() = default;
  virtual int param_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual Eigen::VectorXd decode(const Eigen::VectorXd& params) const = 0;
  // Vector-Jacobian product at `params`.
  virtual Eigen::VectorXd backward(const Eigen::VectorXd& params,
                                   const Eigen::VectorXd& upstream) const = 0;
};

// Linear model producing per-vertex values (3Q).
class LinearDecoder final : public Decoder {
 public:
  explicit LinearDecoder(LinearModel model) : model_(std::move(model)) { model_.check(); }

  int param_dim() const override { return model_.param_dim(); }
  int output_dim() const override { return model_.output_dim(); }
  Eigen::VectorXd decode(const Eigen::VectorXd& p) const override {
    return linear_decode(model_, p);
  }
  Eigen::VectorXd backward(const Eigen::VectorXd&,
                           const Eigen::VectorXd& upstream) const override {
    return model_.bases.transpose() * upstream;
  }
  const LinearModel& model() const { return model_; }

 private:
  LinearModel model_;
};

// Linear per-vertex albedo model resampled into the UV grid. Output is the
// row-major U x V x 3 grid data of the albedo map.
class LinearUVDecoder final : public Decoder {
 public:
  LinearUVDecoder(LinearModel model, std::shared_ptr<const RenderContext> ctx)
      : model_(std::move(model)), ctx_(std::move(ctx)) {
    model_.check();
    if (model_.output_dim() != 3 * ctx_->topo.num_vertices)
      throw shape_error("UV decoder: model rows must equal 3Q");
  }

  int param_dim() const override { return model_.param_dim(); }
  int output_dim() const override { return 3 * ctx_->u_size * ctx_->v_size; }
  Eigen::VectorXd decode(const Eigen::VectorXd& p) const override {
    const auto map = vertex_colors_to_uv(linear_decode(model_, p), ctx_->topo, ctx_->texels);
    return Eigen::Map<const Eigen::VectorXd>(map.grid.data.data(),
                                             static_cast<Eigen::Index>(map.grid.data.size()));
  }
  Eigen::VectorXd backward(const Eigen::VectorXd&,
                           const Eigen::VectorXd& upstream) const override {
    Grid g(ctx_->u_size, ctx_->v_size, 3);
    std::copy(upstream.data(), upstream.data() + upstream.size(), g.data.begin());
    const auto dv = vertex_attribute_to_uv_backward(ctx_->texels, ctx_->topo, g);
    Eigen::VectorXd flat(3 * dv.size());
    for (std::size_t i = 0; i < dv.size(); ++i) flat.segment<3>(3 * i) = dv[i];
    return model_.bases.transpose() * flat;
  }

  UVAlbedoMap to_map(const Eigen::VectorXd& decoded) const {
    UVAlbedoMap m(ctx_->u_size, ctx_->v_size);
    std::copy(decoded.data(), decoded.data() + decoded.size(), m.grid.data.begin());
    m.mask = ctx_->texels.region;
    return m;
  }

 private:
  LinearModel model_;
  std::shared_ptr<const RenderContext> ctx_;
};

// out = b2 + W2 tanh(W1 p + b1) with fixed pseudo-random weights. Stands
// in for a nonlinear decoder in gradient tests.
class TwoLayerDecoder final : public Decoder {
 public:
  TwoLayerDecoder(int in, int hidden, int out, unsigned seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    auto fill = [&](auto& m, double s) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * n(rng);
    };
    w1_.resize(hidden, in);
    b1_.resize(hidden);
    w2_.resize(out, hidden);
    b2_.resize(out);
    fill(w1_, scale / std::sqrt(static_cast<double>(in)));
    fill(b1_, 0.1);
    fill(w2_, scale / std::sqrt(static_cast<double>(hidden)));
    fill(b2_, 0.1);
  }

  int param_dim() const override { return static_cast<int>(w1_.cols()); }
  int output_dim() const override { return static_cast<int>(w2_.rows()); }
  Eigen::VectorXd decode(const Eigen::VectorXd& p) const override {
    return b2_ + w2_ * (w1_ * p + b1_).array().tanh().matrix();
  }
  Eigen::VectorXd backward(const Eigen::VectorXd& p,
                           const Eigen::VectorXd& upstream) const override {
    const Eigen::ArrayXd h = (w1_ * p + b1_).array().tanh();
    const Eigen::VectorXd dh = ((w2_.transpose() * upstream).array() * (1.0 - h * h)).matrix();
    return w1_.transpose() * dh;
  }

 private:
  Eigen::MatrixXd w1_, w2_;
  Eigen::VectorXd b1_, b2_;
};

// Everything stored in a model file.
struct FaceModel {
  Topology topo;
  UnwrapConstants unwrap;
  int u_size = 0;
  int v_size = 0;
  LinearModel shape;   // rows = 3Q
  LinearModel albedo;  // rows = 3Q, per-vertex RGB

  int num_vertices() const { return topo.num_vertices; }

  void check() const {
    validate(topo, u_size, v_size);
    const int rows = 3 * topo.num_vertices;
    shape.check();
    albedo.check();
    if (shape.output_dim() != rows)
      throw shape_error("shape basis rows (" + std::to_string(shape.output_dim()) +
                        ") do not match 3Q (" + std::to_string(rows) + ")");
    if (albedo.output_dim() != rows)
      throw shape_error("albedo basis rows (" + std::to_string(albedo.output_dim()) +
                        ") do not match 3Q (" + std::to_string(rows) + ")");
  }
};

}  // namespace facefit
