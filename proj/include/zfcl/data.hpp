#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zfcl/tensor.hpp"

namespace zfcl {

struct Dataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;
  std::vector<int64_t> ids;  // sample identities, used for probe hygiene
  int num_classes = 0;

  int64_t size() const { return images.data.empty() ? 0 : images.shape[0]; }
  Tensor<float> gather_images(const std::vector<int64_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<int64_t>& idx) const;
  Dataset take(const std::vector<int64_t>& idx) const;
};

struct TaskData {
  std::string name;
  Dataset train, test;
};

// Synthetic image classification source: per-class sinusoidal templates plus
// uniform pixel noise. Small enough for CPU epochs, separable enough that a
// tiny CNN reaches high accuracy.
struct SynthSpec {
  int classes = 4;
  int image = 12;
  int train_per_class = 64;
  int test_per_class = 32;
  double noise = 0.25;
  uint64_t seed = 7;
};

TaskData synth_base_task(const SynthSpec& spec);
Dataset synth_probe(const SynthSpec& spec, int count, uint64_t seed);

Dataset rotate_dataset(const Dataset& d, double degrees);
Dataset permute_dataset(const Dataset& d, uint64_t seed);
Dataset class_subset(const Dataset& d, const std::vector<int>& keep);

TaskData rotate_task(const TaskData& base, double degrees);
TaskData permute_task(const TaskData& base, uint64_t seed);

enum class TaskKind { Rotate, Permute, ClassSplit };

std::vector<TaskData> synth_tasks(const TaskData& base, int n_tasks, TaskKind kind,
                                  uint64_t seed);

// IDX (big-endian header) ingestion; pixels scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Raw tensor file (ZFCT container with train/test images+labels).
void save_tensor_dataset(const TaskData& t, const std::string& path);
TaskData load_tensor_dataset(const std::string& path);

// Data addressing used by the CLI and protocol files:
//   synth:base | synth:rotate:<deg> | synth:permute:<seed> | synth:subset:a,b,...
//   idx:<dir>  (train-images.idx / train-labels.idx / test-images.idx / test-labels.idx)
//   file:<path>  (ZFCT container)
TaskData resolve_data_spec(const std::string& spec, const SynthSpec& synth);

}  // namespace zfcl
