#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"
#include "capembed/matrix.hpp"

namespace capembed {

enum class Activation { kSigmoid, kLinear };
enum class Mode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::kSigmoid;
  bool use_batchnorm = false;
  double dropout_p = 0.0;
};

// Hidden stack of sigmoid layers with batchnorm + dropout, then a linear
// embedding layer with neither.
inline std::vector<LayerSpec> make_embedding_specs(std::size_t input_dim,
                                                   const std::vector<std::size_t>& hidden_dims,
                                                   std::size_t embedding_dim,
                                                   double dropout_p = 0.1) {
  std::vector<LayerSpec> specs;
  std::size_t in = input_dim;
  for (std::size_t h : hidden_dims) {
    specs.push_back({in, h, Activation::kSigmoid, true, dropout_p});
    in = h;
  }
  specs.push_back({in, embedding_dim, Activation::kLinear, false, 0.0});
  return specs;
}

struct DenseParams {
  Matrix weight;  // out_dim x in_dim
  std::vector<double> bias;
};

struct BatchNormParams {
  std::vector<double> gain;
  std::vector<double> shift;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

struct Layer {
  LayerSpec spec;
  DenseParams dense;
  BatchNormParams bn;  // vectors empty when spec.use_batchnorm is false
};

struct LayerGrads {
  Matrix d_weight;
  std::vector<double> d_bias;
  std::vector<double> d_gain;
  std::vector<double> d_shift;
};

struct NetworkGradients {
  std::vector<LayerGrads> layers;
  LayerGrads head;
  bool has_head = false;
};

// Per-forward caches sufficient for exact backprop.
struct LayerTape {
  Matrix input;
  Matrix xhat;                  // batchnorm output before gain/shift
  std::vector<double> inv_std;  // 1/sqrt(batch var + eps)
  Matrix activated;             // activation output, before dropout
  Matrix mask;                  // dropout keep mask (0/1)
};

struct GradientTape {
  std::vector<LayerTape> layers;
  Matrix pre_norm;            // embedding layer output before L2 normalization
  std::vector<double> norms;  // row norms when normalization was applied
  bool normalized = false;
  std::vector<double> scores;  // head sigmoid outputs
  bool has_scores = false;
  bool train_mode = false;
  std::uint64_t forward_id = 0;
  std::size_t batch_size = 0;
};

struct ForwardResult {
  Matrix embeddings;
  std::vector<double> scores;
  GradientTape tape;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class EmbeddingNetwork {
 public:
  std::vector<Layer> layers;
  std::optional<DenseParams> head;  // scalar detection head (sigmoid)
  Mode mode = Mode::kTrain;
  std::uint64_t master_seed = 0;
  bool normalize_default = false;

  std::size_t input_dim() const { return layers.front().spec.in_dim; }
  std::size_t embedding_dim() const { return layers.back().spec.out_dim; }

  void set_mode(Mode m) { mode = m; }
  void reseed_dropout(std::uint64_t seed) { rng_.seed(seed); }

  Rng& rng() { return rng_; }
  std::uint64_t last_forward_id() const { return forward_count_; }
  std::uint64_t bump_forward_id() { return ++forward_count_; }

 private:
  Rng rng_;
  std::uint64_t forward_count_ = 0;
};

inline void validate_specs(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw ConfigError("network: need at least one layer");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.in_dim == 0 || s.out_dim == 0) {
      throw ConfigError("network: layer dimensions must be positive");
    }
    if (s.dropout_p < 0.0 || s.dropout_p >= 1.0) {
      throw ConfigError("network: dropout_p must lie in [0, 1)");
    }
    if (i > 0 && specs[i - 1].out_dim != s.in_dim) {
      throw ConfigError("network: layer dimension chain mismatch");
    }
  }
  const auto& last = specs.back();
  if (last.activation != Activation::kLinear || last.use_batchnorm ||
      last.dropout_p != 0.0) {
    throw ConfigError("network: embedding layer must be linear without batchnorm/dropout");
  }
}

// Glorot-uniform weights in +-sqrt(6/(in+out)), zero biases, identity
// batchnorm with running mean 0 / var 1. Deterministic per seed.
inline EmbeddingNetwork xavier_init(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  validate_specs(specs);
  EmbeddingNetwork net;
  net.master_seed = seed;
  net.reseed_dropout(mix64(seed));
  for (const auto& spec : specs) {
    Layer layer;
    layer.spec = spec;
    layer.dense.weight = Matrix(spec.out_dim, spec.in_dim);
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.in_dim + spec.out_dim));
    for (auto& w : layer.dense.weight.data()) w = net.rng().uniform(-bound, bound);
    layer.dense.bias.assign(spec.out_dim, 0.0);
    if (spec.use_batchnorm) {
      layer.bn.gain.assign(spec.out_dim, 1.0);
      layer.bn.shift.assign(spec.out_dim, 0.0);
      layer.bn.running_mean.assign(spec.out_dim, 0.0);
      layer.bn.running_var.assign(spec.out_dim, 1.0);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// Adds a scalar sigmoid detection head on the embedding output. The head is
// initialized from the network's rng stream, so the result is deterministic.
inline EmbeddingNetwork append_head(const EmbeddingNetwork& net, const LayerSpec& head) {
  if (head.in_dim != net.embedding_dim() || head.out_dim != 1) {
    throw ConfigError("append_head: head must map embedding_dim -> 1");
  }
  if (head.activation != Activation::kSigmoid || head.use_batchnorm ||
      head.dropout_p != 0.0) {
    throw ConfigError("append_head: head is a plain sigmoid dense layer");
  }
  EmbeddingNetwork out = net;
  DenseParams params;
  params.weight = Matrix(1, head.in_dim);
  const double bound = std::sqrt(6.0 / static_cast<double>(head.in_dim + 1));
  for (auto& w : params.weight.data()) w = out.rng().uniform(-bound, bound);
  params.bias.assign(1, 0.0);
  out.head = std::move(params);
  return out;
}

inline EmbeddingNetwork remove_head(const EmbeddingNetwork& net) {
  EmbeddingNetwork out = net;
  out.head.reset();
  return out;
}

// Forward pass. Train mode draws fresh dropout masks from the network rng and
// updates batchnorm running statistics; eval mode is deterministic and
// read-only apart from the forward counter. Set with_scores to also run the
// detection head (on the pre-normalization embedding).
inline ForwardResult forward(EmbeddingNetwork& net, const Matrix& batch, bool normalize,
                             bool with_scores = false) {
  if (batch.cols() != net.input_dim()) {
    throw DataError("forward: batch width does not match network input");
  }
  if (batch.rows() == 0) throw DataError("forward: empty batch");
  const bool train = net.mode == Mode::kTrain;
  const std::size_t b_size = batch.rows();
  if (train && b_size < 2) {
    for (const auto& l : net.layers) {
      if (l.spec.use_batchnorm) {
        throw DataError("forward: train-mode batchnorm requires batch size >= 2");
      }
    }
  }
  if (with_scores && !net.head) throw ConfigError("forward: network has no head");

  ForwardResult res;
  res.tape.train_mode = train;
  res.tape.batch_size = b_size;
  res.tape.layers.resize(net.layers.size());

  Matrix x = batch;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& layer = net.layers[li];
    auto& tape = res.tape.layers[li];
    if (train) tape.input = x;

    Matrix z = matmul_abt(x, layer.dense.weight);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += layer.dense.bias[c];
    }

    if (layer.spec.use_batchnorm) {
      const std::size_t dim = layer.spec.out_dim;
      const double n = static_cast<double>(b_size);
      if (train) {
        std::vector<double> mean(dim, 0.0), var(dim, 0.0);
        for (std::size_t r = 0; r < b_size; ++r) {
          for (std::size_t c = 0; c < dim; ++c) mean[c] += z(r, c);
        }
        for (std::size_t c = 0; c < dim; ++c) mean[c] /= n;
        for (std::size_t r = 0; r < b_size; ++r) {
          for (std::size_t c = 0; c < dim; ++c) {
            const double d = z(r, c) - mean[c];
            var[c] += d * d;
          }
        }
        for (std::size_t c = 0; c < dim; ++c) var[c] /= n;
        tape.inv_std.resize(dim);
        for (std::size_t c = 0; c < dim; ++c) {
          tape.inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEps);
        }
        tape.xhat = Matrix(b_size, dim);
        for (std::size_t r = 0; r < b_size; ++r) {
          for (std::size_t c = 0; c < dim; ++c) {
            tape.xhat(r, c) = (z(r, c) - mean[c]) * tape.inv_std[c];
            z(r, c) = layer.bn.gain[c] * tape.xhat(r, c) + layer.bn.shift[c];
          }
        }
        for (std::size_t c = 0; c < dim; ++c) {
          layer.bn.running_mean[c] =
              kBatchNormMomentum * layer.bn.running_mean[c] + (1.0 - kBatchNormMomentum) * mean[c];
          layer.bn.running_var[c] =
              kBatchNormMomentum * layer.bn.running_var[c] + (1.0 - kBatchNormMomentum) * var[c];
        }
      } else {
        for (std::size_t c = 0; c < dim; ++c) {
          const double inv = 1.0 / std::sqrt(layer.bn.running_var[c] + kBatchNormEps);
          for (std::size_t r = 0; r < b_size; ++r) {
            z(r, c) = layer.bn.gain[c] * (z(r, c) - layer.bn.running_mean[c]) * inv +
                      layer.bn.shift[c];
          }
        }
      }
    }

    if (layer.spec.activation == Activation::kSigmoid) {
      for (auto& v : z.data()) v = sigmoid(v);
    }
    if (train) tape.activated = z;

    if (train && layer.spec.dropout_p > 0.0) {
      const double p = layer.spec.dropout_p;
      const double scale = 1.0 / (1.0 - p);
      tape.mask = Matrix(z.rows(), z.cols());
      for (std::size_t i = 0; i < z.data().size(); ++i) {
        const bool keep = net.rng().uniform() >= p;
        tape.mask.data()[i] = keep ? 1.0 : 0.0;
        z.data()[i] = keep ? z.data()[i] * scale : 0.0;
      }
    }
    x = std::move(z);
  }

  res.tape.pre_norm = x;
  if (normalize) {
    res.tape.normalized = true;
    res.tape.norms.resize(b_size);
    for (std::size_t r = 0; r < b_size; ++r) {
      double nsq = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) nsq += x(r, c) * x(r, c);
      const double norm = std::sqrt(nsq);
      res.tape.norms[r] = norm;
      if (norm > 0.0) {
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) /= norm;
      }
    }
  }
  res.embeddings = std::move(x);

  if (with_scores) {
    const auto& h = *net.head;
    res.scores.resize(b_size);
    for (std::size_t r = 0; r < b_size; ++r) {
      double z = h.bias[0];
      const auto row = res.tape.pre_norm.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) z += h.weight(0, c) * row[c];
      res.scores[r] = sigmoid(z);
    }
    res.tape.scores = res.scores;
    res.tape.has_scores = true;
  }

  res.tape.forward_id = net.bump_forward_id();
  return res;
}

namespace detail {

inline NetworkGradients zero_gradients(const EmbeddingNetwork& net) {
  NetworkGradients g;
  g.layers.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& spec = net.layers[i].spec;
    g.layers[i].d_weight = Matrix(spec.out_dim, spec.in_dim);
    g.layers[i].d_bias.assign(spec.out_dim, 0.0);
    if (spec.use_batchnorm) {
      g.layers[i].d_gain.assign(spec.out_dim, 0.0);
      g.layers[i].d_shift.assign(spec.out_dim, 0.0);
    }
  }
  if (net.head) {
    g.has_head = true;
    g.head.d_weight = Matrix(1, net.embedding_dim());
    g.head.d_bias.assign(1, 0.0);
  }
  return g;
}

}  // namespace detail

// Exact gradients of the last train-mode forward. d_embeddings is the loss
// gradient w.r.t. the returned embeddings (post-normalization when it was
// enabled); d_scores, when non-empty, is the loss gradient w.r.t. the head
// outputs and flows back through the shared body.
inline NetworkGradients backward(const EmbeddingNetwork& net, const GradientTape& tape,
                                 const Matrix& d_embeddings,
                                 const std::vector<double>& d_scores = {}) {
  if (!tape.train_mode) throw DataError("backward: tape must come from a train-mode forward");
  if (tape.forward_id != net.last_forward_id()) {
    throw DataError("backward: stale tape (another forward ran since)");
  }
  if (d_embeddings.rows() != tape.batch_size ||
      d_embeddings.cols() != net.embedding_dim()) {
    throw DataError("backward: d_embeddings shape mismatch");
  }
  if (!d_scores.empty() && !tape.has_scores) {
    throw DataError("backward: d_scores given but forward ran without scores");
  }

  NetworkGradients grads = detail::zero_gradients(net);
  const std::size_t b_size = tape.batch_size;
  const std::size_t e_dim = net.embedding_dim();

  // gradient w.r.t. the pre-normalization embedding
  Matrix g(b_size, e_dim);
  if (tape.normalized) {
    for (std::size_t r = 0; r < b_size; ++r) {
      const double norm = tape.norms[r];
      if (norm == 0.0) continue;  // normalization left the row untouched
      double dot = 0.0;
      for (std::size_t c = 0; c < e_dim; ++c) {
        dot += d_embeddings(r, c) * tape.pre_norm(r, c) / norm;
      }
      for (std::size_t c = 0; c < e_dim; ++c) {
        const double y = tape.pre_norm(r, c) / norm;
        g(r, c) = (d_embeddings(r, c) - dot * y) / norm;
      }
    }
  } else {
    g = d_embeddings;
  }

  if (!d_scores.empty()) {
    if (d_scores.size() != b_size) throw DataError("backward: d_scores length mismatch");
    const auto& h = *net.head;
    for (std::size_t r = 0; r < b_size; ++r) {
      const double s = tape.scores[r];
      const double dz = d_scores[r] * s * (1.0 - s);
      grads.head.d_bias[0] += dz;
      for (std::size_t c = 0; c < e_dim; ++c) {
        grads.head.d_weight(0, c) += dz * tape.pre_norm(r, c);
        g(r, c) += dz * h.weight(0, c);
      }
    }
  }

  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& layer = net.layers[li];
    const auto& lt = tape.layers[li];
    const std::size_t dim = layer.spec.out_dim;

    if (layer.spec.dropout_p > 0.0) {
      const double scale = 1.0 / (1.0 - layer.spec.dropout_p);
      for (std::size_t i = 0; i < g.data().size(); ++i) {
        g.data()[i] *= lt.mask.data()[i] * scale;
      }
    }

    if (layer.spec.activation == Activation::kSigmoid) {
      for (std::size_t i = 0; i < g.data().size(); ++i) {
        const double a = lt.activated.data()[i];
        g.data()[i] *= a * (1.0 - a);
      }
    }

    if (layer.spec.use_batchnorm) {
      auto& lg = grads.layers[li];
      const double n = static_cast<double>(b_size);
      std::vector<double> sum_dxhat(dim, 0.0), sum_dxhat_xhat(dim, 0.0);
      for (std::size_t r = 0; r < b_size; ++r) {
        for (std::size_t c = 0; c < dim; ++c) {
          const double dy = g(r, c);
          lg.d_gain[c] += dy * lt.xhat(r, c);
          lg.d_shift[c] += dy;
          const double dxhat = dy * layer.bn.gain[c];
          sum_dxhat[c] += dxhat;
          sum_dxhat_xhat[c] += dxhat * lt.xhat(r, c);
        }
      }
      for (std::size_t r = 0; r < b_size; ++r) {
        for (std::size_t c = 0; c < dim; ++c) {
          const double dxhat = g(r, c) * layer.bn.gain[c];
          g(r, c) = (lt.inv_std[c] / n) *
                    (n * dxhat - sum_dxhat[c] - lt.xhat(r, c) * sum_dxhat_xhat[c]);
        }
      }
    }

    auto& lg = grads.layers[li];
    lg.d_weight = matmul_atb(g, lt.input);
    for (std::size_t r = 0; r < b_size; ++r) {
      for (std::size_t c = 0; c < dim; ++c) lg.d_bias[c] += g(r, c);
    }
    if (li > 0) g = matmul(g, layer.dense.weight);
  }
  return grads;
}

// Plain SGD: parameter <- parameter - lr * gradient.
inline void sgd_step(EmbeddingNetwork& net, const NetworkGradients& grads, double lr) {
  if (grads.layers.size() != net.layers.size()) {
    throw DataError("sgd_step: gradient/layer count mismatch");
  }
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto& layer = net.layers[li];
    const auto& lg = grads.layers[li];
    if (lg.d_weight.rows() != layer.dense.weight.rows() ||
        lg.d_weight.cols() != layer.dense.weight.cols()) {
      throw DataError("sgd_step: weight gradient shape mismatch");
    }
    for (std::size_t i = 0; i < layer.dense.weight.data().size(); ++i) {
      layer.dense.weight.data()[i] -= lr * lg.d_weight.data()[i];
    }
    for (std::size_t i = 0; i < layer.dense.bias.size(); ++i) {
      layer.dense.bias[i] -= lr * lg.d_bias[i];
    }
    if (layer.spec.use_batchnorm) {
      for (std::size_t i = 0; i < layer.bn.gain.size(); ++i) {
        layer.bn.gain[i] -= lr * lg.d_gain[i];
        layer.bn.shift[i] -= lr * lg.d_shift[i];
      }
    }
  }
  if (net.head && grads.has_head) {
    for (std::size_t i = 0; i < net.head->weight.data().size(); ++i) {
      net.head->weight.data()[i] -= lr * grads.head.d_weight.data()[i];
    }
    net.head->bias[0] -= lr * grads.head.d_bias[0];
  }
}

// --- serialization ---------------------------------------------------------

inline nlohmann::ordered_json network_to_json(const EmbeddingNetwork& net) {
  nlohmann::ordered_json j;
  j["master_seed"] = net.master_seed;
  j["normalize_default"] = net.normalize_default;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : net.layers) {
    nlohmann::ordered_json lj;
    lj["in_dim"] = layer.spec.in_dim;
    lj["out_dim"] = layer.spec.out_dim;
    lj["activation"] = layer.spec.activation == Activation::kSigmoid ? "sigmoid" : "linear";
    lj["batchnorm"] = layer.spec.use_batchnorm;
    lj["dropout_p"] = layer.spec.dropout_p;
    lj["weight"] = layer.dense.weight.data();
    lj["bias"] = layer.dense.bias;
    if (layer.spec.use_batchnorm) {
      lj["gain"] = layer.bn.gain;
      lj["shift"] = layer.bn.shift;
      lj["running_mean"] = layer.bn.running_mean;
      lj["running_var"] = layer.bn.running_var;
    }
    j["layers"].push_back(std::move(lj));
  }
  if (net.head) {
    nlohmann::ordered_json hj;
    hj["weight"] = net.head->weight.data();
    hj["bias"] = net.head->bias;
    j["head"] = std::move(hj);
  } else {
    j["head"] = nullptr;
  }
  return j;
}

inline EmbeddingNetwork network_from_json(const nlohmann::json& j) {
  EmbeddingNetwork net;
  net.master_seed = j.at("master_seed").get<std::uint64_t>();
  net.normalize_default = j.at("normalize_default").get<bool>();
  net.reseed_dropout(mix64(net.master_seed));
  for (const auto& lj : j.at("layers")) {
    Layer layer;
    layer.spec.in_dim = lj.at("in_dim").get<std::size_t>();
    layer.spec.out_dim = lj.at("out_dim").get<std::size_t>();
    layer.spec.activation = lj.at("activation").get<std::string>() == "sigmoid"
                                ? Activation::kSigmoid
                                : Activation::kLinear;
    layer.spec.use_batchnorm = lj.at("batchnorm").get<bool>();
    layer.spec.dropout_p = lj.at("dropout_p").get<double>();
    layer.dense.weight = Matrix(layer.spec.out_dim, layer.spec.in_dim);
    layer.dense.weight.data() = lj.at("weight").get<std::vector<double>>();
    if (layer.dense.weight.data().size() != layer.spec.out_dim * layer.spec.in_dim) {
      throw DataError("checkpoint: weight size mismatch");
    }
    layer.dense.bias = lj.at("bias").get<std::vector<double>>();
    if (layer.spec.use_batchnorm) {
      layer.bn.gain = lj.at("gain").get<std::vector<double>>();
      layer.bn.shift = lj.at("shift").get<std::vector<double>>();
      layer.bn.running_mean = lj.at("running_mean").get<std::vector<double>>();
      layer.bn.running_var = lj.at("running_var").get<std::vector<double>>();
      for (double v : layer.bn.running_var) {
        if (!(v > 0.0)) throw DataError("checkpoint: running variance must be positive");
      }
    }
    net.layers.push_back(std::move(layer));
  }
  if (net.layers.empty()) throw DataError("checkpoint: no layers");
  if (!j.at("head").is_null()) {
    DenseParams h;
    h.weight = Matrix(1, net.embedding_dim());
    h.weight.data() = j.at("head").at("weight").get<std::vector<double>>();
    if (h.weight.data().size() != net.embedding_dim()) {
      throw DataError("checkpoint: head size mismatch");
    }
    h.bias = j.at("head").at("bias").get<std::vector<double>>();
    net.head = std::move(h);
  }
  return net;
}

}  // namespace capembed
