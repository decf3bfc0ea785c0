#pragma once

#include <optional>
#include <string>
#include <vector>

#include "zfcl/autodiff.hpp"
#include "zfcl/data.hpp"
#include "zfcl/trainer.hpp"

namespace zfcl {

struct LwFConfig {
  double lambda = 1.0;
  double temperature = 2.0;
};

// L_new = CE(new head, labels) + lambda * sum over old heads of the
// temperature-softened distillation cross-entropy against the frozen teacher.
template <class T>
Var<T> lwf_loss(Tape<T>& tape, Var<T> new_logits, const std::vector<Var<T>>& student_old,
                const std::vector<Tensor<T>>& teacher_old, const std::vector<int>& labels,
                const LwFConfig& cfg) {
  if (cfg.lambda < 0) fail(Errc::InvalidArgument, "lwf lambda must be >= 0");
  if (!(cfg.temperature > 0)) fail(Errc::InvalidArgument, "lwf temperature must be > 0");
  if (student_old.size() != teacher_old.size())
    fail(Errc::InvalidArgument, "missing teacher logits: " + std::to_string(student_old.size()) +
                                    " student heads vs " + std::to_string(teacher_old.size()) +
                                    " teacher outputs");
  Var<T> loss = cross_entropy(tape, new_logits, labels);
  if (cfg.lambda == 0 || student_old.empty()) return loss;
  Var<T> distill;
  for (size_t i = 0; i < student_old.size(); ++i) {
    Var<T> d = distill_ce(tape, student_old[i], teacher_old[i], (T)cfg.temperature);
    distill = i == 0 ? d : add(tape, distill, d);
  }
  return add(tape, loss, scale(tape, distill, (T)cfg.lambda));
}

// Phase-by-task evaluation grid; r[i][j] is defined only for j <= i.
struct AccuracyMatrix {
  std::vector<std::string> task_names;
  std::vector<std::vector<std::optional<double>>> r;

  int phases() const { return (int)r.size(); }
  void record(int phase, int task, double accuracy);
};

// F[i][j] = R[j][j] - R[i][j]
AccuracyMatrix forgetting(const AccuracyMatrix& m);
// method-level summary: max over tasks of final-phase forgetting
double max_final_forgetting(const AccuracyMatrix& m);

struct SeqTask {
  std::string name;
  Dataset train, test;
};

// Sequential trunk-training baselines. tasks[0] is the base task the given
// network was pretrained on; later tasks retrain the shared weights.
AccuracyMatrix run_finetune_sequence(const Network& base, const std::vector<SeqTask>& tasks,
                                     const TrainConfig& cfg);
// LwF: batch-norm layers stay in evaluation mode during training; old heads
// are distilled toward the frozen pre-phase teacher.
AccuracyMatrix run_lwf_sequence(const Network& base, const std::vector<SeqTask>& tasks,
                                const TrainConfig& cfg);

// Full-model training on one dataset starting from the given network; the
// final running statistics and head are baked into the returned network.
Network finetune_full(const Network& start, const Dataset& train, const TrainConfig& cfg);

// Fresh random init trained on the base task.
Network pretrain(const Arch& arch, const Dataset& train, const TrainConfig& cfg);

}  // namespace zfcl
