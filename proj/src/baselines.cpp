#include "zfcl/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "zfcl/rng.hpp"

namespace zfcl {

void AccuracyMatrix::record(int phase, int task, double accuracy) {
  if (task > phase) fail(Errc::InvalidArgument, "R[i][j] is defined only for j <= i");
  if (phase >= (int)r.size()) r.resize((size_t)phase + 1);
  for (auto& row : r) row.resize(task_names.size());
  r[(size_t)phase][(size_t)task] = accuracy;
}

AccuracyMatrix forgetting(const AccuracyMatrix& m) {
  AccuracyMatrix f;
  f.task_names = m.task_names;
  f.r.assign(m.r.size(), std::vector<std::optional<double>>(m.task_names.size()));
  for (size_t i = 0; i < m.r.size(); ++i)
    for (size_t j = 0; j < m.r[i].size(); ++j) {
      if (!m.r[i][j].has_value() || j >= m.r.size() || !m.r[j][j].has_value()) continue;
      f.r[i][j] = *m.r[j][j] - *m.r[i][j];
    }
  return f;
}

double max_final_forgetting(const AccuracyMatrix& m) {
  AccuracyMatrix f = forgetting(m);
  if (f.r.empty()) return 0.0;
  double worst = 0.0;
  for (const auto& cell : f.r.back())
    if (cell.has_value()) worst = std::max(worst, *cell);
  return worst;
}

namespace {

// Trunk + per-task heads + running stats that evolve across phases.
struct MutableModel {
  Network net;
  std::vector<Tensor<float>> head_w, head_b;
  BnStats stats;
};

struct TrunkLeaves {
  BoundModel bound;
  std::map<std::string, Var<float>> vars;
  std::map<std::string, Tensor<float>*> ptrs;
};

TrunkLeaves bind_trunk(Tape<float>& tape, MutableModel& m, Mode mode, bool trainable) {
  TrunkLeaves t;
  t.bound.net = &m.net;
  t.bound.mode = mode;
  t.bound.stats = &m.stats;
  for (size_t i = 0; i < m.net.conv_w.size(); ++i) {
    std::string ci = "conv" + std::to_string(i);
    Var<float> w = tape.leaf(m.net.conv_w[i], trainable);
    Var<float> b = tape.leaf(m.net.conv_b[i], trainable);
    Var<float> g = tape.leaf(m.net.bn[i].gamma, trainable);
    Var<float> be = tape.leaf(m.net.bn[i].beta, trainable);
    t.bound.conv_w.push_back(w);
    t.bound.conv_b.push_back(b);
    t.bound.bn_gamma.push_back(g);
    t.bound.bn_beta.push_back(be);
    if (trainable) {
      t.vars[ci + ".w"] = w;
      t.vars[ci + ".b"] = b;
      t.vars["bn" + std::to_string(i) + ".gamma"] = g;
      t.vars["bn" + std::to_string(i) + ".beta"] = be;
      t.ptrs[ci + ".w"] = &m.net.conv_w[i];
      t.ptrs[ci + ".b"] = &m.net.conv_b[i];
      t.ptrs["bn" + std::to_string(i) + ".gamma"] = &m.net.bn[i].gamma;
      t.ptrs["bn" + std::to_string(i) + ".beta"] = &m.net.bn[i].beta;
    }
  }
  t.bound.fc_w = tape.leaf(m.net.fc_w, trainable);
  t.bound.fc_b = tape.leaf(m.net.fc_b, trainable);
  if (trainable) {
    t.vars["fc.w"] = t.bound.fc_w;
    t.vars["fc.b"] = t.bound.fc_b;
    t.ptrs["fc.w"] = &m.net.fc_w;
    t.ptrs["fc.b"] = &m.net.fc_b;
  }
  return t;
}

Tensor<float> eval_logits(MutableModel& m, int head, const Tensor<float>& images) {
  Tape<float> tape;
  TrunkLeaves t = bind_trunk(tape, m, Mode::Eval, false);
  FeatureOut f = model_features(tape, t.bound, tape.constant(images));
  Var<float> logits = head_logits(tape, f.features, tape.constant(m.head_w[(size_t)head]),
                                  tape.constant(m.head_b[(size_t)head]));
  return tape.val(logits);
}

void eval_all_tasks(MutableModel& m, const std::vector<SeqTask>& tasks, int phase,
                    AccuracyMatrix& matrix) {
  for (int j = 0; j <= phase; ++j) {
    EvalResult ev = evaluate(
        [&](const Tensor<float>& images) { return eval_logits(m, j, images); },
        tasks[(size_t)j].test);
    matrix.record(phase, j, ev.accuracy);
  }
}

enum class SeqKind { Finetune, Lwf };

AccuracyMatrix run_sequence(const Network& base, const std::vector<SeqTask>& tasks,
                            const TrainConfig& cfg, SeqKind kind) {
  cfg.validate();
  if (tasks.empty()) fail(Errc::EmptyDataset, "sequence needs at least one task");
  AccuracyMatrix matrix;
  for (const SeqTask& t : tasks) matrix.task_names.push_back(t.name);

  MutableModel m;
  m.net = base;
  m.head_w.push_back(base.head_w);
  m.head_b.push_back(base.head_b);
  m.stats = BnStats::from(base);
  eval_all_tasks(m, tasks, 0, matrix);

  for (size_t phase = 1; phase < tasks.size(); ++phase) {
    const SeqTask& task = tasks[phase];
    if (task.train.size() == 0) fail(Errc::EmptyDataset, "task '" + task.name + "' has no data");
    Rng rng(cfg.seed + 7919 * phase);
    Tensor<float> hw = Tensor<float>::zeros({task.train.num_classes, base.arch.fc_dim});
    Tensor<float> hb = Tensor<float>::zeros({task.train.num_classes});
    init_linear_uniform(hw, hb, rng);
    m.head_w.push_back(std::move(hw));
    m.head_b.push_back(std::move(hb));

    // LwF distills toward the model as it stood before this phase.
    std::optional<MutableModel> teacher;
    if (kind == SeqKind::Lwf) teacher = m;
    LwFConfig lwf_cfg{cfg.lwf_lambda, cfg.lwf_temperature};

    AdamState adam;
    int64_t step = 0;
    std::vector<int64_t> order((size_t)task.train.size());
    for (int64_t i = 0; i < task.train.size(); ++i) order[(size_t)i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      double lr = cfg.lr_at_epoch(epoch);
      rng.shuffle(order);
      for (int64_t start = 0; start < (int64_t)order.size(); start += cfg.batch_size) {
        int64_t bs = std::min<int64_t>(cfg.batch_size, (int64_t)order.size() - start);
        if (bs < 2) continue;
        std::vector<int64_t> idx(order.begin() + start, order.begin() + start + bs);
        Tensor<float> images = task.train.gather_images(idx);
        std::vector<int> labels = task.train.gather_labels(idx);

        Tape<float> tape;
        Mode mode = kind == SeqKind::Lwf ? Mode::Eval : Mode::Train;
        TrunkLeaves t = bind_trunk(tape, m, mode, true);
        FeatureOut feat = model_features(tape, t.bound, tape.constant(images));
        std::map<std::string, Var<float>> head_vars;
        std::map<std::string, Tensor<float>*> head_ptrs;
        Var<float> new_w = tape.leaf(m.head_w[phase], true);
        Var<float> new_b = tape.leaf(m.head_b[phase], true);
        head_vars["head" + std::to_string(phase) + ".w"] = new_w;
        head_vars["head" + std::to_string(phase) + ".b"] = new_b;
        head_ptrs["head" + std::to_string(phase) + ".w"] = &m.head_w[phase];
        head_ptrs["head" + std::to_string(phase) + ".b"] = &m.head_b[phase];
        Var<float> new_logits = head_logits(tape, feat.features, new_w, new_b);

        Var<float> loss;
        if (kind == SeqKind::Finetune) {
          loss = cross_entropy(tape, new_logits, labels);
        } else {
          std::vector<Var<float>> student_old;
          std::vector<Tensor<float>> teacher_old;
          for (size_t j = 0; j < phase; ++j) {
            Var<float> ow = tape.leaf(m.head_w[j], true);
            Var<float> ob = tape.leaf(m.head_b[j], true);
            head_vars["head" + std::to_string(j) + ".w"] = ow;
            head_vars["head" + std::to_string(j) + ".b"] = ob;
            head_ptrs["head" + std::to_string(j) + ".w"] = &m.head_w[j];
            head_ptrs["head" + std::to_string(j) + ".b"] = &m.head_b[j];
            student_old.push_back(head_logits(tape, feat.features, ow, ob));
            teacher_old.push_back(eval_logits(*teacher, (int)j, images));
          }
          loss = lwf_loss(tape, new_logits, student_old, teacher_old, labels, lwf_cfg);
        }
        float loss_val = tape.val(loss)[0];
        if (!std::isfinite(loss_val))
          fail(Errc::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
        tape.backward(loss);

        std::map<std::string, Tensor<float>> grads;
        std::map<std::string, Tensor<float>*> ptrs = t.ptrs;
        for (auto& [name, var] : t.vars) grads[name] = tape.grad(var);
        for (auto& [name, var] : head_vars) {
          grads[name] = tape.grad(var);
          ptrs[name] = head_ptrs[name];
        }
        adam_step(ptrs, grads, adam, lr);
        if (kind == SeqKind::Finetune) apply_bn_updates(m.net, feat.bn_updates, m.stats);
        step++;
      }
    }
    eval_all_tasks(m, tasks, (int)phase, matrix);
  }
  return matrix;
}

}  // namespace

AccuracyMatrix run_finetune_sequence(const Network& base, const std::vector<SeqTask>& tasks,
                                     const TrainConfig& cfg) {
  return run_sequence(base, tasks, cfg, SeqKind::Finetune);
}

AccuracyMatrix run_lwf_sequence(const Network& base, const std::vector<SeqTask>& tasks,
                                const TrainConfig& cfg) {
  return run_sequence(base, tasks, cfg, SeqKind::Lwf);
}

Network finetune_full(const Network& start, const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) fail(Errc::EmptyDataset, "training dataset is empty");
  MutableModel m;
  m.net = start;
  m.stats = BnStats::from(start);
  Rng rng(cfg.seed);
  if (train.num_classes != start.arch.num_classes) {
    Tensor<float> hw = Tensor<float>::zeros({train.num_classes, start.arch.fc_dim});
    Tensor<float> hb = Tensor<float>::zeros({train.num_classes});
    init_linear_uniform(hw, hb, rng);
    m.net.head_w = std::move(hw);
    m.net.head_b = std::move(hb);
    m.net.arch.num_classes = train.num_classes;
  }
  m.head_w.push_back(m.net.head_w);
  m.head_b.push_back(m.net.head_b);

  AdamState adam;
  int64_t step = 0;
  std::vector<int64_t> order((size_t)train.size());
  for (int64_t i = 0; i < train.size(); ++i) order[(size_t)i] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr_at_epoch(epoch);
    rng.shuffle(order);
    for (int64_t start_i = 0; start_i < (int64_t)order.size(); start_i += cfg.batch_size) {
      int64_t bs = std::min<int64_t>(cfg.batch_size, (int64_t)order.size() - start_i);
      if (bs < 2) continue;
      std::vector<int64_t> idx(order.begin() + start_i, order.begin() + start_i + bs);
      Tensor<float> images = train.gather_images(idx);
      std::vector<int> labels = train.gather_labels(idx);

      Tape<float> tape;
      TrunkLeaves t = bind_trunk(tape, m, Mode::Train, true);
      FeatureOut feat = model_features(tape, t.bound, tape.constant(images));
      Var<float> hw = tape.leaf(m.head_w[0], true);
      Var<float> hb = tape.leaf(m.head_b[0], true);
      Var<float> logits = head_logits(tape, feat.features, hw, hb);
      Var<float> loss = cross_entropy(tape, logits, labels);
      if (!std::isfinite(tape.val(loss)[0]))
        fail(Errc::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
      tape.backward(loss);

      std::map<std::string, Tensor<float>> grads;
      std::map<std::string, Tensor<float>*> ptrs = t.ptrs;
      for (auto& [name, var] : t.vars) grads[name] = tape.grad(var);
      grads["head.w"] = tape.grad(hw);
      grads["head.b"] = tape.grad(hb);
      ptrs["head.w"] = &m.head_w[0];
      ptrs["head.b"] = &m.head_b[0];
      adam_step(ptrs, grads, adam, lr);
      apply_bn_updates(m.net, feat.bn_updates, m.stats);
      step++;
    }
  }
  m.net.head_w = m.head_w[0];
  m.net.head_b = m.head_b[0];
  for (size_t i = 0; i < m.net.bn.size(); ++i) {
    m.net.bn[i].running_mean = m.stats.mean[i];
    m.net.bn[i].running_var = m.stats.var[i];
  }
  return m.net;
}

Network pretrain(const Arch& arch, const Dataset& train, const TrainConfig& cfg) {
  return finetune_full(Network::init(arch, cfg.seed), train, cfg);
}

}  // namespace zfcl
