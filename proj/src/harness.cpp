#include "zfcl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>

namespace zfcl {

namespace {

// Shortest round-trip formatting keeps report files byte-stable.
std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write '" + path + "'");
  out.write(content.data(), (std::streamsize)content.size());
}

nlohmann::json matrix_to_json(const AccuracyMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : m.r) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& cell : row)
      jr.push_back(cell.has_value() ? nlohmann::json(*cell) : nlohmann::json(nullptr));
    rows.push_back(jr);
  }
  return {{"tasks", m.task_names}, {"rows", rows}};
}

std::string matrix_to_csv(const AccuracyMatrix& m, bool percent) {
  std::string csv = "phase";
  for (const std::string& name : m.task_names) csv += "," + name;
  csv += "\n";
  for (size_t i = 0; i < m.r.size(); ++i) {
    csv += std::to_string(i + 1);
    for (const auto& cell : m.r[i])
      csv += "," + (cell.has_value() ? fmt_double(percent ? *cell * 100.0 : *cell) : std::string());
    csv += "\n";
  }
  return csv;
}

}  // namespace

std::pair<int, int> parse_resolution(const std::string& s) {
  size_t x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    fail(Errc::BadConfig, "resolution must look like MxN, got '" + s + "'");
  try {
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    fail(Errc::BadConfig, "resolution must look like MxN, got '" + s + "'");
  }
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lr_decay_epoch = j.value("lr_decay_epoch", c.lr_decay_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("lr_grid")) c.lr_grid = j.at("lr_grid").get<std::vector<double>>();
  c.mask_tau = j.value("mask_tau", c.mask_tau);
  c.mask_s0 = j.value("mask_s0", c.mask_s0);
  c.lwf_lambda = j.value("lwf_lambda", c.lwf_lambda);
  c.lwf_temperature = j.value("lwf_temperature", c.lwf_temperature);
  c.validate();
  return c;
}

namespace {

SynthSpec synth_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.classes = j.value("classes", s.classes);
  s.image = j.value("image", s.image);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace

ProtocolSpec protocol_from_json(const nlohmann::json& j) {
  ProtocolSpec p;
  p.method = method_from_name(j.value("method", "zfcl"));
  if (j.contains("dataset")) p.dataset = synth_from_json(j.at("dataset"));
  if (j.contains("train")) p.train = train_config_from_json(j.at("train"));
  p.base_data = j.value("base_data", p.base_data);
  for (const auto& jt : j.value("tasks", nlohmann::json::array())) {
    ProtocolTask t;
    t.name = jt.at("name").get<std::string>();
    t.data = jt.at("data").get<std::string>();
    auto [m1, m2] = parse_resolution(jt.value("resolution", "4x4"));
    t.spec.m1 = m1;
    t.spec.m2 = m2;
    t.spec.method = interp_from_name(jt.value("interp", "bicubic"));
    p.tasks.push_back(std::move(t));
  }
  if (j.contains("probe")) {
    p.probe_count = j.at("probe").value("count", p.probe_count);
    p.probe_seed = j.at("probe").value("seed", p.probe_seed);
  }
  if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  p.out_dir = j.value("out", p.out_dir);
  return p;
}

ProtocolSpec load_protocol(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open protocol '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::BadConfig, "protocol '" + path + "': " + e.what());
  }
  return protocol_from_json(j);
}

std::vector<VerifyOutcome> verify_zero_forgetting(const TaskBank& bank, const Network& base,
                                                  const Tensor<float>& probe_images) {
  std::vector<VerifyOutcome> out;
  for (const TaskRecord& rec : bank.records) {
    if (!rec.probe_hash)
      fail(Errc::MissingProbeHash, "task '" + rec.task_id + "' has no recorded probe hash");
    uint64_t h = logits_hash(activate_task(bank, base, rec.task_id).logits(probe_images));
    out.push_back({rec.task_id, h == *rec.probe_hash});
  }
  return out;
}

bool all_pass(const std::vector<VerifyOutcome>& v) {
  for (const VerifyOutcome& o : v)
    if (!o.pass) return false;
  return true;
}

namespace {

void check_probe_hygiene(const Dataset& train, const Dataset& probe) {
  std::set<int64_t> ids(train.ids.begin(), train.ids.end());
  for (int64_t id : probe.ids)
    if (ids.count(id))
      fail(Errc::InvalidArgument, "probe sample id " + std::to_string(id) +
                                      " appears in the training data");
}

void run_one_seed(const ProtocolSpec& spec, uint64_t seed, SeedRun& run) {
  run.seed = seed;
  TrainConfig cfg = spec.train;
  cfg.seed = seed;
  TaskData base_task = resolve_data_spec(spec.base_data, spec.dataset);
  if (base_task.train.size() == 0) fail(Errc::EmptyDataset, "base task has no training data");
  int in_ch = base_task.train.images.shape[1];
  int img = base_task.train.images.shape[2];
  Arch arch = Arch::small_cnn(in_ch, img, base_task.train.num_classes);
  Network net = pretrain(arch, base_task.train, cfg);

  std::vector<TaskData> data;
  data.push_back(std::move(base_task));
  for (const ProtocolTask& t : spec.tasks) {
    TaskData d = resolve_data_spec(t.data, spec.dataset);
    d.name = t.name;
    data.push_back(std::move(d));
  }
  Dataset probe = synth_probe(spec.dataset, spec.probe_count, spec.probe_seed);
  for (const TaskData& d : data) check_probe_hygiene(d.train, probe);

  run.matrix.task_names.clear();
  for (const TaskData& d : data) run.matrix.task_names.push_back(d.name);

  bool bank_method = spec.method == Method::Zfcl || spec.method == Method::Mask ||
                     spec.method == Method::Readout;
  if (bank_method) {
    TaskBank bank = make_bank(net);
    TaskRecord base_rec;
    base_rec.task_id = data[0].name;
    base_rec.method = Method::Zfcl;
    base_rec.spec = ModulationSpec{1, 1, InterpMethod::Bicubic};
    base_rec.head_w = net.head_w;
    base_rec.head_b = net.head_b;
    base_rec.class_count = net.arch.num_classes;
    base_rec.bn = bn_snapshot(net, BnStats::from(net));
    register_task(bank, net, std::move(base_rec), &probe.images);
    run.matrix.record(0, 0,
                      evaluate(activate_task(bank, net, data[0].name), data[0].test).accuracy);
    run.verify = verify_zero_forgetting(bank, net, probe.images);

    for (size_t phase = 1; phase < data.size(); ++phase) {
      const ProtocolTask& pt = spec.tasks[phase - 1];
      TaskRecord rec =
          train_task(net, pt.name, pt.spec, data[phase].train, cfg, spec.method);
      register_task(bank, net, std::move(rec), &probe.images);
      for (size_t j = 0; j <= phase; ++j)
        run.matrix.record((int)phase, (int)j,
                          evaluate(activate_task(bank, net, data[j].name), data[j].test).accuracy);
      run.verify = verify_zero_forgetting(bank, net, probe.images);
    }
    for (const TaskRecord& rec : bank.records)
      run.storage.push_back({rec.task_id, method_name(rec.method),
                             storage_bits(rec, net, 16),
                             parity_ratio(rec, net, 16)});
    if (!spec.out_dir.empty()) {
      std::filesystem::create_directories(spec.out_dir);
      run.bank_path = spec.out_dir + "/bank_seed" + std::to_string(seed) + ".zfcb";
      save_bank(bank, run.bank_path);
      save_checkpoint(net, spec.out_dir + "/base_seed" + std::to_string(seed) + ".zfck");
    }
  } else {
    std::vector<SeqTask> tasks;
    for (TaskData& d : data) tasks.push_back({d.name, std::move(d.train), std::move(d.test)});
    run.matrix = spec.method == Method::Finetune ? run_finetune_sequence(net, tasks, cfg)
                                                 : run_lwf_sequence(net, tasks, cfg);
  }
}

AccuracyMatrix mean_matrix(const std::vector<SeedRun>& runs) {
  AccuracyMatrix mean;
  for (const SeedRun& run : runs) {
    if (run.matrix.r.empty()) continue;
    if (mean.task_names.empty()) {
      mean.task_names = run.matrix.task_names;
      mean.r.assign(run.matrix.r.size(),
                    std::vector<std::optional<double>>(mean.task_names.size()));
    }
  }
  if (mean.task_names.empty()) return mean;
  for (size_t i = 0; i < mean.r.size(); ++i)
    for (size_t j = 0; j < mean.task_names.size(); ++j) {
      double sum = 0.0;
      int n = 0;
      for (const SeedRun& run : runs)
        if (i < run.matrix.r.size() && j < run.matrix.r[i].size() &&
            run.matrix.r[i][j].has_value()) {
          sum += *run.matrix.r[i][j];
          n++;
        }
      if (n == (int)runs.size() && n > 0) mean.r[i][j] = sum / n;
    }
  return mean;
}

}  // namespace

ProtocolResult run_protocol(const ProtocolSpec& spec) {
  spec.train.validate();
  ProtocolResult result;
  result.spec = spec;
  try {
    for (uint64_t seed : spec.seeds) {
      result.runs.emplace_back();
      run_one_seed(spec, seed, result.runs.back());
    }
    result.mean = mean_matrix(result.runs);
  } catch (const Error& e) {
    result.error = e.what();
    result.mean = mean_matrix(result.runs);
    if (!spec.out_dir.empty()) emit_report(result, spec.out_dir);
    throw;
  }
  if (!spec.out_dir.empty()) emit_report(result, spec.out_dir);
  return result;
}

void emit_report(const ProtocolResult& result, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_file(out_dir + "/accuracy_matrix.csv", matrix_to_csv(result.mean, true));
  write_file(out_dir + "/forgetting.csv", matrix_to_csv(forgetting(result.mean), true));

  std::string storage = "task,method,bits,ratio_vs_mask\n";
  if (!result.runs.empty())
    for (const StorageRow& row : result.runs.front().storage)
      storage += row.task_id + "," + row.method + "," + std::to_string(row.bits) + "," +
                 fmt_double(row.ratio_vs_mask) + "\n";
  write_file(out_dir + "/storage.csv", storage);

  nlohmann::json seeds = nlohmann::json::array();
  for (uint64_t s : result.spec.seeds) seeds.push_back(s);
  nlohmann::json runs = nlohmann::json::array();
  for (const SeedRun& run : result.runs) {
    nlohmann::json verify = nlohmann::json::array();
    for (const VerifyOutcome& v : run.verify) verify.push_back({{"task", v.task_id}, {"pass", v.pass}});
    runs.push_back({{"seed", run.seed},
                    {"matrix", matrix_to_json(run.matrix)},
                    {"verify", verify},
                    {"bank", run.bank_path}});
  }
  // final-phase accuracy spread across seeds
  nlohmann::json final_acc = nlohmann::json::object();
  if (!result.mean.r.empty()) {
    for (size_t j = 0; j < result.mean.task_names.size(); ++j) {
      double lo = 1e300, hi = -1e300, sum = 0.0;
      int n = 0;
      for (const SeedRun& run : result.runs) {
        if (run.matrix.r.empty()) continue;
        const auto& cell = run.matrix.r.back()[j];
        if (!cell.has_value()) continue;
        lo = std::min(lo, *cell);
        hi = std::max(hi, *cell);
        sum += *cell;
        n++;
      }
      if (n > 0)
        final_acc[result.mean.task_names[j]] = {
            {"mean", sum / n}, {"min", lo}, {"max", hi}};
    }
  }
  nlohmann::json summary = {
      {"method", method_name(result.spec.method)},
      {"seeds", seeds},
      {"dataset",
       {{"classes", result.spec.dataset.classes},
        {"image", result.spec.dataset.image},
        {"train_per_class", result.spec.dataset.train_per_class},
        {"test_per_class", result.spec.dataset.test_per_class},
        {"noise", result.spec.dataset.noise},
        {"seed", result.spec.dataset.seed},
        {"substitution",
         "synthetic desk-scale tasks stand in for the full-scale datasets"}}},
      {"runs", runs},
      {"mean_matrix", matrix_to_json(result.mean)},
      {"final_accuracy", final_acc},
      {"max_final_forgetting", max_final_forgetting(result.mean)}};
  if (result.error) summary["error"] = *result.error;
  write_file(out_dir + "/summary.json", summary.dump(2) + "\n");
}

std::vector<SweepRow> sweep_resolution(const Network& base, const TaskData& task,
                                       const std::vector<std::pair<int, int>>& resolutions,
                                       const std::vector<InterpMethod>& methods,
                                       const TrainConfig& cfg) {
  if (resolutions.empty() || methods.empty())
    fail(Errc::BadConfig, "sweep needs at least one resolution and one method");
  std::vector<SweepRow> rows;
  for (const auto& [m1, m2] : resolutions)
    for (InterpMethod im : methods) {
      SweepRow row;
      row.m1 = m1;
      row.m2 = m2;
      row.method = interp_name(im);
      try {
        ModulationSpec spec{m1, m2, im};
        TaskRecord rec = train_task(base, "sweep", spec, task.train, cfg, Method::Zfcl);
        for (const auto& [layer, grid] : rec.grids) row.trainable_params += grid.numel();
        row.storage = storage_bits(rec, base, 16);
        TaskBank bank = make_bank(base);
        register_task(bank, base, std::move(rec));
        row.accuracy = evaluate(activate_task(bank, base, "sweep"), task.test).accuracy;
      } catch (const Error& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  // full-model training reference
  SweepRow ref;
  ref.method = "full-finetune";
  try {
    Network tuned = finetune_full(base, task.train, cfg);
    ref.accuracy =
        evaluate([&](const Tensor<float>& im) { return network_logits(tuned, im); }, task.test)
            .accuracy;
    for (const auto& w : tuned.conv_w) ref.trainable_params += w.numel();
    for (const auto& b : tuned.conv_b) ref.trainable_params += b.numel();
    for (const auto& bn : tuned.bn) ref.trainable_params += bn.gamma.numel() + bn.beta.numel();
    ref.trainable_params += tuned.fc_w.numel() + tuned.fc_b.numel() + tuned.head_w.numel() +
                            tuned.head_b.numel();
    ref.storage = 32 * ref.trainable_params;
  } catch (const Error& e) {
    ref.error = e.what();
  }
  rows.push_back(std::move(ref));
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::string csv = "m1,m2,method,accuracy_percent,storage_bits,trainable_params,error\n";
  for (const SweepRow& r : rows)
    csv += std::to_string(r.m1) + "," + std::to_string(r.m2) + "," + r.method + "," +
           fmt_double(r.accuracy * 100.0) + "," + std::to_string(r.storage) + "," +
           std::to_string(r.trainable_params) + "," + r.error + "\n";
  write_file(path, csv);
}

}  // namespace zfcl
