#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "zfcl/interp.hpp"
#include "zfcl/layers.hpp"
#include "zfcl/tensor.hpp"

namespace zfcl {

enum class Method { Zfcl, Mask, Lwf, Readout, Finetune };

const char* method_name(Method m);
Method method_from_name(const std::string& s);

// Frozen per-task tensor stored at 16-bit precision. Quantization happens once
// at record construction; activation always dequantizes the same bits, so
// in-memory and reloaded activations are bit-identical.
struct GridData {
  std::vector<int> shape;
  std::vector<uint16_t> bits;
  int64_t numel() const { return (int64_t)bits.size(); }
};

GridData quantize_f16(const Tensor<float>& t);
Tensor<float> dequantize_f16(const GridData& g);

struct TaskRecord {
  std::string task_id;
  Method method = Method::Zfcl;  // Zfcl or Mask
  ModulationSpec spec;           // meaningful for Zfcl
  std::map<std::string, GridData> grids;  // layer id -> grid values (zfcl) or realized mask
  Tensor<float> head_w, head_b;
  int class_count = 0;
  BNSnapshot bn;
  std::optional<uint64_t> probe_hash;  // logit hash on the probe set, recorded at registration
};

struct TaskBank {
  uint64_t base_hash = 0;
  std::vector<TaskRecord> records;

  bool has(const std::string& id) const;
  const TaskRecord& find(const std::string& id) const;
};

TaskBank make_bank(const Network& base);

// Appends a record after validating its shapes against the base geometry.
// Prior records are never touched. When probe images are given, the record's
// probe logit hash is computed and stored as part of registration.
void register_task(TaskBank& bank, const Network& base, TaskRecord record,
                   const Tensor<float>* probe_images = nullptr);

// Read-only assembly of frozen base + one task's parameters, in eval mode.
struct ActiveModel {
  const Network* net = nullptr;
  Method method = Method::Zfcl;
  ModulationSpec spec;
  std::map<std::string, Tensor<float>> factors;  // dequantized grids / masks
  Tensor<float> head_w, head_b;
  BnStats stats;

  Tensor<float> logits(const Tensor<float>& images) const;
};

ActiveModel activate_task(const TaskBank& bank, const Network& base, const std::string& task_id);

uint64_t logits_hash(const Tensor<float>& logits);

// Storage accounting. Modulation grids are charged at precision_bits per
// element, masks at one bit per base weight; classifier head and BN statistics
// are charged at 32 bits for every method so comparisons isolate the
// modulation-vs-mask cost.
int64_t storage_bits(const TaskRecord& record, const Network& base, int precision_bits);
int64_t mask_storage_bits(const Network& base, int class_count);
double parity_ratio(const TaskRecord& record, const Network& base, int precision_bits);

void save_bank(const TaskBank& bank, const std::string& path);
TaskBank load_bank(const std::string& path);
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

}  // namespace zfcl
