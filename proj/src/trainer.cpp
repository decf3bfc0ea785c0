#include "zfcl/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "zfcl/rng.hpp"

namespace zfcl {

void TrainConfig::validate() const {
  if (!(lr > 0)) fail(Errc::BadConfig, "lr must be > 0");
  if (epochs < 1) fail(Errc::BadConfig, "epochs must be >= 1");
  if (batch_size < 2) fail(Errc::BadConfig, "batch_size must be >= 2 (train-mode batch norm)");
  if (!(lwf_temperature > 0)) fail(Errc::BadConfig, "lwf temperature must be > 0");
  if (lwf_lambda < 0) fail(Errc::BadConfig, "lwf lambda must be >= 0");
}

double TrainConfig::lr_at_epoch(int epoch) const {
  return epoch >= lr_decay_epoch ? lr * lr_decay_factor : lr;
}

void adam_step(const std::map<std::string, Tensor<float>*>& params,
               const std::map<std::string, Tensor<float>>& grads, AdamState& state, double lr) {
  if (params.size() != grads.size())
    fail(Errc::InvalidArgument, "adam_step: " + std::to_string(params.size()) + " params vs " +
                                    std::to_string(grads.size()) + " grads");
  if (state.slots.empty()) {
    for (const auto& [name, p] : params)
      state.slots[name] = {Tensor<float>::zeros(p->shape), Tensor<float>::zeros(p->shape)};
  }
  if (state.slots.size() != params.size())
    fail(Errc::InvalidArgument, "adam_step: state keys do not match the trainable set");
  state.step++;
  double bc1 = 1.0 - std::pow(state.beta1, (double)state.step);
  double bc2 = 1.0 - std::pow(state.beta2, (double)state.step);
  float b1 = (float)state.beta1, b2 = (float)state.beta2;
  for (const auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) fail(Errc::InvalidArgument, "adam_step: missing gradient for " + name);
    auto sit = state.slots.find(name);
    if (sit == state.slots.end())
      fail(Errc::InvalidArgument, "adam_step: state has no slot for " + name);
    const Tensor<float>& g = git->second;
    require_same_shape(p->shape, g.shape, "adam_step");
    Tensor<float>& m = sit->second.m;
    Tensor<float>& v = sit->second.v;
    for (int64_t i = 0; i < p->numel(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      double mhat = (double)m[i] / bc1;
      double vhat = (double)v[i] / bc2;
      (*p)[i] = (float)((double)(*p)[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

namespace {

struct NamedParams {
  std::map<std::string, Tensor<float>> values;

  std::map<std::string, Tensor<float>*> pointers() {
    std::map<std::string, Tensor<float>*> out;
    for (auto& [k, v] : values) out[k] = &v;
    return out;
  }
};

// Leaves for the frozen base; adapters and head come from the task's params.
BoundModel bind_frozen_base(Tape<float>& tape, const Network& net, Mode mode,
                            const BnStats* stats) {
  BoundModel bm;
  bm.net = &net;
  bm.mode = mode;
  bm.stats = stats;
  for (size_t i = 0; i < net.conv_w.size(); ++i) {
    bm.conv_w.push_back(tape.constant(net.conv_w[i]));
    bm.conv_b.push_back(tape.constant(net.conv_b[i]));
    bm.bn_gamma.push_back(tape.constant(net.bn[i].gamma));
    bm.bn_beta.push_back(tape.constant(net.bn[i].beta));
  }
  bm.fc_w = tape.constant(net.fc_w);
  bm.fc_b = tape.constant(net.fc_b);
  return bm;
}

}  // namespace

TaskRecord train_task(const Network& base, const std::string& task_id, const ModulationSpec& spec,
                      const Dataset& train, const TrainConfig& cfg, Method method) {
  cfg.validate();
  if (method != Method::Zfcl && method != Method::Mask && method != Method::Readout)
    fail(Errc::InvalidArgument, "train_task handles frozen-base methods only");
  if (train.size() == 0) fail(Errc::EmptyDataset, "training dataset is empty");
  if (spec.m1 < 1 || spec.m2 < 1) fail(Errc::BadConfig, "modulation resolution must be >= 1");

  Rng rng(cfg.seed);
  NamedParams params;
  std::vector<std::string> layer_ids = base.modulated_layer_ids();
  if (method == Method::Zfcl) {
    for (const std::string& id : layer_ids)
      params.values["grid/" + id] =
          Tensor<float>::ones(grid_shape_for(base.modulated_weight_shape(id), spec));
  } else if (method == Method::Mask) {
    for (const std::string& id : layer_ids)
      params.values["mask/" + id] =
          Tensor<float>::full(base.modulated_weight_shape(id), cfg.mask_s0);
  }
  Tensor<float> head_w = Tensor<float>::zeros({train.num_classes, base.arch.fc_dim});
  Tensor<float> head_b = Tensor<float>::zeros({train.num_classes});
  init_linear_uniform(head_w, head_b, rng);
  params.values["head/w"] = std::move(head_w);
  params.values["head/b"] = std::move(head_b);

  BnStats stats = BnStats::from(base);
  AdamState adam;
  int64_t step = 0;
  std::vector<int64_t> order((size_t)train.size());
  for (int64_t i = 0; i < train.size(); ++i) order[(size_t)i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr_at_epoch(epoch);
    rng.shuffle(order);
    for (int64_t start = 0; start < (int64_t)order.size(); start += cfg.batch_size) {
      int64_t bs = std::min<int64_t>(cfg.batch_size, (int64_t)order.size() - start);
      if (bs < 2) continue;  // train-mode batch norm needs >= 2 samples
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + bs);
      Tensor<float> images = train.gather_images(idx);
      std::vector<int> labels = train.gather_labels(idx);

      Tape<float> tape;
      BoundModel bm = bind_frozen_base(tape, base, Mode::Train, &stats);
      bm.adapters.resize(layer_ids.size());
      std::map<std::string, Var<float>> leaves;
      for (auto& [name, value] : params.values) leaves[name] = tape.leaf(value, true);
      for (size_t i = 0; i < layer_ids.size(); ++i) {
        if (method == Method::Zfcl) {
          bm.adapters[i].kind = LayerAdapter::Kind::Grid;
          bm.adapters[i].param = leaves["grid/" + layer_ids[i]];
          bm.adapters[i].method = spec.method;
        } else if (method == Method::Mask) {
          bm.adapters[i].kind = LayerAdapter::Kind::Mask;
          bm.adapters[i].param = leaves["mask/" + layer_ids[i]];
          bm.adapters[i].tau = cfg.mask_tau;
        }
      }
      bm.head_w = leaves["head/w"];
      bm.head_b = leaves["head/b"];

      ForwardOut out = model_forward(tape, bm, tape.constant(images));
      Var<float> loss = cross_entropy(tape, out.logits, labels);
      float loss_val = tape.val(loss)[0];
      if (!std::isfinite(loss_val))
        fail(Errc::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
      tape.backward(loss);

      std::map<std::string, Tensor<float>> grads;
      for (auto& [name, leaf] : leaves) grads[name] = tape.grad(leaf);
      auto ptrs = params.pointers();
      adam_step(ptrs, grads, adam, lr);
      apply_bn_updates(base, out.bn_updates, stats);
      step++;
    }
  }

  TaskRecord rec;
  rec.task_id = task_id;
  rec.method = method == Method::Mask ? Method::Mask : Method::Zfcl;
  rec.spec = spec;
  if (method == Method::Zfcl) {
    for (const std::string& id : layer_ids)
      rec.grids[id] = quantize_f16(params.values["grid/" + id]);
  } else if (method == Method::Mask) {
    for (const std::string& id : layer_ids) {
      const Tensor<float>& scores = params.values["mask/" + id];
      Tensor<float> mask = Tensor<float>::zeros(scores.shape);
      for (int64_t i = 0; i < scores.numel(); ++i)
        mask[i] = scores[i] > cfg.mask_tau ? 1.0f : 0.0f;
      rec.grids[id] = quantize_f16(mask);
    }
  }
  rec.head_w = params.values["head/w"];
  rec.head_b = params.values["head/b"];
  rec.class_count = train.num_classes;
  rec.bn = bn_snapshot(base, stats);
  return rec;
}

EvalResult evaluate(const LogitsFn& logits_fn, const Dataset& data, int batch_size) {
  if (data.size() == 0) fail(Errc::EmptyDataset, "evaluation dataset is empty");
  int64_t correct = 0;
  double loss_sum = 0.0;
  for (int64_t start = 0; start < data.size(); start += batch_size) {
    int64_t bs = std::min<int64_t>(batch_size, data.size() - start);
    std::vector<int64_t> idx((size_t)bs);
    for (int64_t i = 0; i < bs; ++i) idx[(size_t)i] = start + i;
    Tensor<float> logits = logits_fn(data.gather_images(idx));
    std::vector<int> labels = data.gather_labels(idx);
    int C = logits.shape[1];
    for (int64_t b = 0; b < bs; ++b) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (logits.at2((int)b, c) > logits.at2((int)b, best)) best = c;
      if (best == labels[(size_t)b]) correct++;
      double m = logits.at2((int)b, 0);
      for (int c = 1; c < C; ++c) m = std::max(m, (double)logits.at2((int)b, c));
      double z = 0.0;
      for (int c = 0; c < C; ++c) z += std::exp((double)logits.at2((int)b, c) - m);
      loss_sum += std::log(z) + m - (double)logits.at2((int)b, labels[(size_t)b]);
    }
  }
  return {(double)correct / (double)data.size(), loss_sum / (double)data.size()};
}

EvalResult evaluate(const ActiveModel& model, const Dataset& data, int batch_size) {
  return evaluate([&](const Tensor<float>& images) { return model.logits(images); }, data,
                  batch_size);
}

LrSearchResult lr_search(const Network& base, const std::string& task_id,
                         const ModulationSpec& spec, const Dataset& train,
                         const TrainConfig& cfg, Method method) {
  if (cfg.lr_grid.empty()) fail(Errc::BadConfig, "lr_grid is empty");
  int64_t n = train.size();
  int64_t n_val = std::max<int64_t>(1, n / 5);
  if (n - n_val < 2) fail(Errc::EmptyDataset, "not enough samples for a held-out split");
  std::vector<int64_t> train_idx, val_idx;
  for (int64_t i = 0; i < n - n_val; ++i) train_idx.push_back(i);
  for (int64_t i = n - n_val; i < n; ++i) val_idx.push_back(i);
  Dataset fit = train.take(train_idx);
  Dataset val = train.take(val_idx);

  LrSearchResult result;
  bool have_best = false;
  double best_acc = -1.0, best_lr = 0.0;
  Error last_error(Errc::BadConfig, "no grid point succeeded");
  for (double lr : cfg.lr_grid) {
    TrainConfig c = cfg;
    c.lr = lr;
    try {
      TaskRecord rec = train_task(base, task_id, spec, fit, c, method);
      TaskBank tmp = make_bank(base);
      register_task(tmp, base, rec);
      EvalResult ev = evaluate(activate_task(tmp, base, task_id), val);
      result.tried.push_back({lr, ev.accuracy});
      bool better = !have_best || ev.accuracy > best_acc ||
                    (ev.accuracy == best_acc && lr < best_lr);
      if (better) {
        have_best = true;
        best_acc = ev.accuracy;
        best_lr = lr;
        result.best_config = c;
        result.best_record = std::move(rec);
      }
    } catch (const Error& e) {
      result.tried.push_back({lr, -1.0});
      last_error = e;
    }
  }
  if (!have_best) throw last_error;
  return result;
}

}  // namespace zfcl
