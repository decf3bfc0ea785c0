#include "zfcl/layers.hpp"

#include <cmath>

namespace zfcl {

Arch Arch::small_cnn(int in_channels, int image_size, int num_classes) {
  Arch a;
  a.in_channels = in_channels;
  a.image_size = image_size;
  a.num_classes = num_classes;
  a.convs = {
      {in_channels, 8, 3, 1, 1, 1},
      {8, 16, 3, 2, 1, 1},
      {16, 16, 3, 1, 1, 16},  // depthwise
      {16, 32, 3, 2, 1, 1},
  };
  a.fc_dim = 32;
  return a;
}

void init_linear_uniform(Tensor<float>& w, Tensor<float>& b, Rng& rng) {
  float bound = std::sqrt(1.0f / (float)w.shape[1]);
  for (auto& v : w.data) v = (float)rng.uniform(-bound, bound);
  for (auto& v : b.data) v = 0.0f;
}

Network Network::init(const Arch& arch, uint64_t seed) {
  Network net;
  net.arch = arch;
  Rng rng(seed);
  for (const ConvSpec& c : arch.convs) {
    if (c.cin % c.groups != 0 || c.cout % c.groups != 0)
      fail(Errc::InvalidGeometry, "conv channels not divisible by groups");
    int cpg = c.cin / c.groups;
    Tensor<float> w = Tensor<float>::zeros({c.cout, cpg, c.k, c.k});
    float std_dev = std::sqrt(2.0f / (float)(cpg * c.k * c.k));
    for (auto& v : w.data) v = (float)(rng.normal() * std_dev);
    net.conv_w.push_back(std::move(w));
    net.conv_b.push_back(Tensor<float>::zeros({c.cout}));
    BnParams bn;
    bn.gamma = Tensor<float>::ones({c.cout});
    bn.beta = Tensor<float>::zeros({c.cout});
    bn.running_mean = Tensor<float>::zeros({c.cout});
    bn.running_var = Tensor<float>::ones({c.cout});
    net.bn.push_back(std::move(bn));
  }
  int feat = arch.feature_dim();
  net.fc_w = Tensor<float>::zeros({arch.fc_dim, feat});
  net.fc_b = Tensor<float>::zeros({arch.fc_dim});
  init_linear_uniform(net.fc_w, net.fc_b, rng);
  net.head_w = Tensor<float>::zeros({arch.num_classes, arch.fc_dim});
  net.head_b = Tensor<float>::zeros({arch.num_classes});
  init_linear_uniform(net.head_w, net.head_b, rng);
  return net;
}

uint64_t Network::content_hash() const {
  uint64_t h = 14695981039346656037ull;
  int64_t meta[4] = {arch.in_channels, arch.image_size, arch.num_classes, arch.fc_dim};
  h = fnv1a64(meta, sizeof(meta), h);
  for (const ConvSpec& c : arch.convs) {
    int64_t cs[6] = {c.cin, c.cout, c.k, c.stride, c.pad, c.groups};
    h = fnv1a64(cs, sizeof(cs), h);
  }
  for (size_t i = 0; i < conv_w.size(); ++i) {
    h = tensor_hash(conv_w[i], h);
    h = tensor_hash(conv_b[i], h);
    h = tensor_hash(bn[i].gamma, h);
    h = tensor_hash(bn[i].beta, h);
    h = tensor_hash(bn[i].running_mean, h);
    h = tensor_hash(bn[i].running_var, h);
  }
  h = tensor_hash(fc_w, h);
  h = tensor_hash(fc_b, h);
  h = tensor_hash(head_w, h);
  h = tensor_hash(head_b, h);
  return h;
}

std::vector<std::string> Network::modulated_layer_ids() const {
  std::vector<std::string> ids;
  for (size_t i = 0; i < arch.convs.size(); ++i) ids.push_back("conv" + std::to_string(i));
  ids.push_back("fc");
  return ids;
}

std::vector<int> Network::modulated_weight_shape(const std::string& layer_id) const {
  for (size_t i = 0; i < arch.convs.size(); ++i)
    if (layer_id == "conv" + std::to_string(i)) return conv_w[i].shape;
  if (layer_id == "fc") return {fc_w.shape[0], fc_w.shape[1], 1, 1};
  fail(Errc::UnknownTask, "no modulated layer '" + layer_id + "'");
}

int64_t Network::modulated_weight_count() const {
  int64_t n = 0;
  for (const auto& w : conv_w) n += w.numel();
  n += fc_w.numel();
  return n;
}

BnStats BnStats::from(const Network& net) {
  BnStats s;
  for (const BnParams& b : net.bn) {
    s.mean.push_back(b.running_mean);
    s.var.push_back(b.running_var);
  }
  return s;
}

BNSnapshot bn_snapshot(const Network& net, const BnStats& stats) {
  BNSnapshot snap;
  for (size_t i = 0; i < net.bn.size(); ++i)
    snap.entries.push_back({"bn" + std::to_string(i), stats.mean[i], stats.var[i]});
  return snap;
}

void bn_restore(const Network& net, const BNSnapshot& snap, BnStats& stats) {
  if (snap.entries.size() != net.bn.size())
    fail(Errc::ShapeMismatch, "snapshot has " + std::to_string(snap.entries.size()) +
                                  " entries for " + std::to_string(net.bn.size()) + " bn layers");
  for (size_t i = 0; i < snap.entries.size(); ++i) {
    const auto& e = snap.entries[i];
    if (e.layer_id != "bn" + std::to_string(i))
      fail(Errc::ShapeMismatch, "snapshot layer id mismatch at " + e.layer_id);
    require_same_shape(e.mean.shape, net.bn[i].running_mean.shape, "bn_restore mean");
    require_same_shape(e.var.shape, net.bn[i].running_var.shape, "bn_restore var");
    stats.mean[i] = e.mean;
    stats.var[i] = e.var;
  }
}

namespace {

Var<float> effective_weight(Tape<float>& tape, Var<float> base_w, const LayerAdapter& ad,
                            const std::vector<int>& w4_shape) {
  switch (ad.kind) {
    case LayerAdapter::Kind::None:
      return base_w;
    case LayerAdapter::Kind::Grid: {
      Var<float> up = upsample_grid_op(tape, ad.param, w4_shape[0], w4_shape[1], ad.method);
      return mul(tape, base_w, up);
    }
    case LayerAdapter::Kind::Mask: {
      Var<float> m = binarize_ste(tape, ad.param, ad.tau);
      return mul(tape, base_w, m);
    }
  }
  fail(Errc::InvalidArgument, "bad adapter kind");
}

}  // namespace

FeatureOut model_features(Tape<float>& tape, const BoundModel& m, Var<float> x) {
  const Network& net = *m.net;
  size_t n_conv = net.arch.convs.size();
  bool has_adapters = !m.adapters.empty();
  if (has_adapters && m.adapters.size() != n_conv + 1)
    fail(Errc::ShapeMismatch, "adapter list must cover every modulated layer");
  FeatureOut out;
  Var<float> h = x;
  for (size_t i = 0; i < n_conv; ++i) {
    const ConvSpec& cs = net.arch.convs[i];
    Var<float> w = m.conv_w[i];
    if (has_adapters && m.adapters[i].kind != LayerAdapter::Kind::None)
      w = effective_weight(tape, w, m.adapters[i], net.conv_w[i].shape);
    h = conv2d(tape, h, w, cs.stride, cs.pad, cs.groups);
    h = bias_add(tape, h, m.conv_b[i]);
    if (m.mode == Mode::Train) {
      BnTrainResult<float> r =
          batch_norm_train(tape, h, m.bn_gamma[i], m.bn_beta[i], net.bn[i].eps);
      h = r.y;
      const Tensor<float>& xv = tape.val(h);
      int64_t count = (int64_t)xv.shape[0] * (xv.rank() == 4 ? xv.shape[2] * xv.shape[3] : 1);
      out.bn_updates.push_back({std::move(r.batch_mean), std::move(r.batch_var), count});
    } else {
      h = batch_norm_eval(tape, h, m.bn_gamma[i], m.bn_beta[i], m.stats->mean[i],
                          m.stats->var[i], net.bn[i].eps);
    }
    h = relu(tape, h);
  }
  h = global_avg_pool(tape, h);
  {
    Var<float> w = m.fc_w;
    if (has_adapters && m.adapters[n_conv].kind != LayerAdapter::Kind::None) {
      // adapter params use the rank-4 modulation view [out, in, 1, 1]
      const LayerAdapter& ad = m.adapters[n_conv];
      Var<float> factor;
      if (ad.kind == LayerAdapter::Kind::Grid)
        factor = upsample_grid_op(tape, ad.param, net.fc_w.shape[0], net.fc_w.shape[1],
                                  ad.method);
      else
        factor = binarize_ste(tape, ad.param, ad.tau);
      w = mul(tape, w, reshape(tape, factor, net.fc_w.shape));
    }
    h = linear(tape, h, w);
    h = bias_add(tape, h, m.fc_b);
    h = relu(tape, h);
  }
  out.features = h;
  return out;
}

Var<float> head_logits(Tape<float>& tape, Var<float> features, Var<float> head_w,
                       Var<float> head_b) {
  return bias_add(tape, linear(tape, features, head_w), head_b);
}

ForwardOut model_forward(Tape<float>& tape, const BoundModel& m, Var<float> x) {
  FeatureOut f = model_features(tape, m, x);
  return ForwardOut{head_logits(tape, f.features, m.head_w, m.head_b), std::move(f.bn_updates)};
}

Tensor<float> network_logits(const Network& net, const Tensor<float>& images) {
  Tape<float> tape;
  BoundModel bm;
  bm.net = &net;
  bm.mode = Mode::Eval;
  BnStats stats = BnStats::from(net);
  bm.stats = &stats;
  for (size_t i = 0; i < net.conv_w.size(); ++i) {
    bm.conv_w.push_back(tape.constant(net.conv_w[i]));
    bm.conv_b.push_back(tape.constant(net.conv_b[i]));
    bm.bn_gamma.push_back(tape.constant(net.bn[i].gamma));
    bm.bn_beta.push_back(tape.constant(net.bn[i].beta));
  }
  bm.fc_w = tape.constant(net.fc_w);
  bm.fc_b = tape.constant(net.fc_b);
  bm.head_w = tape.constant(net.head_w);
  bm.head_b = tape.constant(net.head_b);
  ForwardOut out = model_forward(tape, bm, tape.constant(images));
  return tape.val(out.logits);
}

void apply_bn_updates(const Network& net, const std::vector<BnBatchUpdate>& updates,
                      BnStats& stats) {
  for (size_t i = 0; i < updates.size(); ++i) {
    const BnBatchUpdate& u = updates[i];
    float mom = net.bn[i].momentum;
    // unbiased variance for the running estimate
    float corr = u.count > 1 ? (float)u.count / (float)(u.count - 1) : 1.0f;
    for (int64_t c = 0; c < stats.mean[i].numel(); ++c) {
      stats.mean[i][c] = (1.0f - mom) * stats.mean[i][c] + mom * u.mean[c];
      stats.var[i][c] = (1.0f - mom) * stats.var[i][c] + mom * (u.var[c] * corr);
    }
  }
}

}  // namespace zfcl
