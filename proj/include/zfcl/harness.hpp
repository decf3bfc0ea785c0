#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zfcl/baselines.hpp"
#include "zfcl/data.hpp"
#include "zfcl/task_bank.hpp"
#include "zfcl/trainer.hpp"

namespace zfcl {

std::pair<int, int> parse_resolution(const std::string& s);  // "4x4" -> (4,4)

struct ProtocolTask {
  std::string name;
  std::string data;  // data spec string, see data.hpp
  ModulationSpec spec;
};

struct ProtocolSpec {
  Method method = Method::Zfcl;
  SynthSpec dataset;
  TrainConfig train;
  std::string base_data = "synth:base";
  std::vector<ProtocolTask> tasks;  // added tasks; the base task is phase 1
  int probe_count = 64;
  uint64_t probe_seed = 999;
  std::vector<uint64_t> seeds = {1};
  std::string out_dir;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
ProtocolSpec protocol_from_json(const nlohmann::json& j);
ProtocolSpec load_protocol(const std::string& path);

struct VerifyOutcome {
  std::string task_id;
  bool pass = false;
};

// Recomputes every task's probe logits through activate_task and compares the
// byte hash against the one recorded at registration.
std::vector<VerifyOutcome> verify_zero_forgetting(const TaskBank& bank, const Network& base,
                                                  const Tensor<float>& probe_images);
bool all_pass(const std::vector<VerifyOutcome>& v);

struct StorageRow {
  std::string task_id;
  std::string method;
  int64_t bits = 0;
  double ratio_vs_mask = 0.0;
};

struct SeedRun {
  uint64_t seed = 0;
  AccuracyMatrix matrix;
  std::vector<VerifyOutcome> verify;  // empty for finetune/lwf
  std::vector<StorageRow> storage;
  std::string bank_path;  // written when out_dir is set (bank methods only)
};

struct ProtocolResult {
  ProtocolSpec spec;
  std::vector<SeedRun> runs;
  AccuracyMatrix mean;  // across seeds
  std::optional<std::string> error;  // set when a phase aborted (partial results)
};

// Executes the protocol for every seed: pretrain on the base task, then add
// tasks phase by phase, evaluating all learned tasks after each phase. Bank
// methods additionally record probe hashes and re-verify after every phase.
ProtocolResult run_protocol(const ProtocolSpec& spec);

void emit_report(const ProtocolResult& result, const std::string& out_dir);

struct SweepRow {
  int m1 = 0, m2 = 0;
  std::string method;  // interpolation name, or "full-finetune" for the reference row
  double accuracy = 0.0;
  int64_t storage = 0;          // storage_bits at 16-bit precision
  int64_t trainable_params = 0; // modulation parameters trained
  std::string error;            // non-empty if this cell failed
};

std::vector<SweepRow> sweep_resolution(const Network& base, const TaskData& task,
                                       const std::vector<std::pair<int, int>>& resolutions,
                                       const std::vector<InterpMethod>& methods,
                                       const TrainConfig& cfg);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);

}  // namespace zfcl
