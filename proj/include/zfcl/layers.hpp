#pragma once

#include <optional>
#include <string>
#include <vector>

#include "zfcl/autodiff.hpp"
#include "zfcl/interp.hpp"
#include "zfcl/rng.hpp"
#include "zfcl/tensor.hpp"

namespace zfcl {

// Frozen base layers. Nothing here is ever written by an optimizer step for
// the modulation / masking methods; fine-tune style baselines copy these
// tensors into their own trainable parameter store instead.

struct ConvSpec {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1, groups = 1;
};

struct Arch {
  int in_channels = 1;
  int image_size = 12;
  int num_classes = 4;  // base task head width
  std::vector<ConvSpec> convs;
  int fc_dim = 32;  // trunk linear after global average pooling

  int feature_dim() const { return convs.empty() ? in_channels : convs.back().cout; }
  static Arch small_cnn(int in_channels, int image_size, int num_classes);
};

struct BnParams {
  Tensor<float> gamma, beta;
  Tensor<float> running_mean, running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

struct Network {
  Arch arch;
  std::vector<Tensor<float>> conv_w;  // [Cout, Cin/groups, k, k]
  std::vector<Tensor<float>> conv_b;  // [Cout]
  std::vector<BnParams> bn;           // one per conv block
  Tensor<float> fc_w, fc_b;           // [fc_dim, feat], [fc_dim]
  Tensor<float> head_w, head_b;       // base-task head [classes, fc_dim], [classes]

  static Network init(const Arch& arch, uint64_t seed);
  uint64_t content_hash() const;

  // Layers that carry a modulation (or mask) slot, in forward order:
  // conv0..convN-1 then fc. Shapes are the rank-4 modulation view
  // ([out, in, 1, 1] for the linear layer).
  std::vector<std::string> modulated_layer_ids() const;
  std::vector<int> modulated_weight_shape(const std::string& layer_id) const;
  int64_t modulated_weight_count() const;
};

// Per-task running statistics (task-local copy; the base network's own stats
// are part of the frozen checkpoint).
struct BnStats {
  std::vector<Tensor<float>> mean, var;

  static BnStats from(const Network& net);
};

struct BNSnapshot {
  struct Entry {
    std::string layer_id;
    Tensor<float> mean, var;
  };
  std::vector<Entry> entries;
};

BNSnapshot bn_snapshot(const Network& net, const BnStats& stats);
void bn_restore(const Network& net, const BNSnapshot& snap, BnStats& stats);

// ---------------------------------------------------------------------------
// Forward pass. All evaluation and training paths go through the same graph
// builder so that repeated evaluation of identical inputs is bit-identical.

enum class Mode { Train, Eval };

struct LayerAdapter {
  enum class Kind { None, Grid, Mask } kind = Kind::None;
  Var<float> param;  // grid values or mask scores leaf
  InterpMethod method = InterpMethod::Bicubic;
  float tau = 0.0f;
};

// Everything the forward pass reads, bound onto one tape.
struct BoundModel {
  const Network* net = nullptr;
  Mode mode = Mode::Eval;
  std::vector<Var<float>> conv_w, conv_b;
  std::vector<Var<float>> bn_gamma, bn_beta;
  Var<float> fc_w, fc_b;
  Var<float> head_w, head_b;
  std::vector<LayerAdapter> adapters;  // size = convs + 1 (trunk fc), may be empty
  const BnStats* stats = nullptr;      // eval: read; train: normalization ignores, update below
};

struct BnBatchUpdate {
  Tensor<float> mean, var;  // biased batch statistics
  int64_t count = 0;        // elements per channel
};

struct ForwardOut {
  Var<float> logits;
  std::vector<BnBatchUpdate> bn_updates;  // train mode only, one per conv block
};

struct FeatureOut {
  Var<float> features;  // after trunk fc + relu
  std::vector<BnBatchUpdate> bn_updates;
};

FeatureOut model_features(Tape<float>& tape, const BoundModel& m, Var<float> x);
Var<float> head_logits(Tape<float>& tape, Var<float> features, Var<float> head_w,
                       Var<float> head_b);
ForwardOut model_forward(Tape<float>& tape, const BoundModel& m, Var<float> x);

// Applies the train-mode batch statistics to the task-local running stats
// (EMA with the layer momentum; variance stored with the unbiased correction).
void apply_bn_updates(const Network& net, const std::vector<BnBatchUpdate>& updates,
                      BnStats& stats);

// Plain eval-mode forward with the network's own head and running statistics.
Tensor<float> network_logits(const Network& net, const Tensor<float>& images);

// Uniform head init in +-sqrt(1/fan_in), zero bias.
void init_linear_uniform(Tensor<float>& w, Tensor<float>& b, Rng& rng);

}  // namespace zfcl
