#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "hamobe/autodiff.hpp"
#include "hamobe/config.hpp"
#include "hamobe/tensor.hpp"

namespace hamobe {

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 1;
};

// Every learnable tensor for a config, in a fixed order.
std::vector<ParamSpec> param_layout(const ModelConfig& config);

// Named learnable tensors. std::map keeps iteration order (and therefore
// checkpoints and flattening) deterministic.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t total_size() const;
  bool all_finite() const;

  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], one stream per tensor name.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  static ModelParams zeros(const ModelConfig& config);

  Tensor flatten() const;
  void unflatten(const Tensor& flat);

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct Model {
  ModelConfig config;
  ModelParams params;
};

// Parameters recorded on a tape for one forward/backward pass.
class BoundModel {
 public:
  BoundModel(Tape& tape, const Model& model, bool requires_grad);
  // Parameters are slices of one flat vector (used for whole-model gradient checks).
  BoundModel(Tape& tape, const ModelConfig& config, const ModelParams& layout, Var flat);

  Var operator[](const std::string& name) const;
  const ModelConfig& config() const { return config_; }
  Tape& tape() const { return *tape_; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  Tape* tape_;
  ModelConfig config_;
  std::map<std::string, Var> vars_;
};

// Gate outputs that replace the single-input gating networks (dual mode).
struct GateWeights {
  Var first;   // [T, K, n1, n2]
  Var second;  // [3]
};

struct StreamOutput {
  Var frames;  // [T, d] per-frame features (F_L, F_S, or temporal tokens)
  Var pooled;  // [d]
};

struct ForwardOutputs {
  std::vector<Var> experts;  // n1 x [T, K, d]
  std::vector<Var> mixed;    // n2 x [T, K, d]
  Var gate1;                 // [T, K, n1, n2]
  StreamOutput long_term;
  StreamOutput short_term;
  StreamOutput temporal;
  Var w2;  // [3]
  Var f;   // [d]
};

// Linear -> GELU -> Linear with parameters prefix.{w1,b1,w2,b2}.
Var mlp(const BoundModel& m, const std::string& prefix, Var x);

std::vector<Var> first_layer_forward(const BoundModel& m, Var volume);
// Softmax over the n1 axis of the gate logits.
Var gate1_forward(const BoundModel& m, Var volume);
// F^(j) = sum_i W[:, :, i, j] * F_i. Rejects weights off the simplex by > 1e-6.
std::vector<Var> mix_layers(std::span<const Var> experts, Var weights);
StreamOutput long_term_forward(const BoundModel& m, Var mixed);
StreamOutput short_term_forward(const BoundModel& m, Var mixed);
StreamOutput temporal_forward(const BoundModel& m, Var mixed);
Var gate2_forward(const BoundModel& m, Var f1, Var f2, Var f3);
// f = w2[0] f_L + w2[1] f_S + w2[2] f_T. Rejects w2 off the simplex by > 1e-6.
Var fuse_embedding(Var f_long, Var f_short, Var f_temporal, Var w2);

ForwardOutputs forward(const BoundModel& m, Var volume, const GateWeights* gates = nullptr);
Var classifier_logits(const BoundModel& m, Var f);

// Value-level result of a forward pass.
struct BiometricEmbedding {
  std::vector<double> f_long, f_short, f_temporal, f;
  std::vector<double> w2;
};

BiometricEmbedding to_embedding(const ForwardOutputs& out);
BiometricEmbedding embed(const Model& model, const Tensor& volume);
Tensor first_gate_weights(const Model& model, const Tensor& volume);

// Throws ErrorKind::Shape unless volume is [T, K, 4d] for the config.
void check_volume_shape(const ModelConfig& config, const Tensor& volume);

}  // namespace hamobe
