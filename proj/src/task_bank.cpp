#include "zfcl/task_bank.hpp"

#include <algorithm>

#include "zfcl/container.hpp"

namespace zfcl {

const char* method_name(Method m) {
  switch (m) {
    case Method::Zfcl: return "zfcl";
    case Method::Mask: return "mask";
    case Method::Lwf: return "lwf";
    case Method::Readout: return "readout";
    case Method::Finetune: return "finetune";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  for (Method m : {Method::Zfcl, Method::Mask, Method::Lwf, Method::Readout, Method::Finetune})
    if (s == method_name(m)) return m;
  fail(Errc::BadConfig, "unknown method '" + s + "'");
}

GridData quantize_f16(const Tensor<float>& t) {
  GridData g;
  g.shape = t.shape;
  g.bits.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) g.bits[i] = f32_to_f16(t.data[i]);
  return g;
}

Tensor<float> dequantize_f16(const GridData& g) {
  std::vector<float> data(g.bits.size());
  for (size_t i = 0; i < g.bits.size(); ++i) data[i] = f16_to_f32(g.bits[i]);
  return Tensor<float>(g.shape, std::move(data));
}

bool TaskBank::has(const std::string& id) const {
  for (const TaskRecord& r : records)
    if (r.task_id == id) return true;
  return false;
}

const TaskRecord& TaskBank::find(const std::string& id) const {
  for (const TaskRecord& r : records)
    if (r.task_id == id) return r;
  fail(Errc::UnknownTask, "no task '" + id + "' in bank");
}

TaskBank make_bank(const Network& base) {
  TaskBank bank;
  bank.base_hash = base.content_hash();
  return bank;
}

namespace {

ActiveModel activate_record(const Network& base, const TaskRecord& rec) {
  ActiveModel m;
  m.net = &base;
  m.method = rec.method;
  m.spec = rec.spec;
  for (const auto& [layer, grid] : rec.grids) m.factors[layer] = dequantize_f16(grid);
  m.head_w = rec.head_w;
  m.head_b = rec.head_b;
  m.stats = BnStats::from(base);
  bn_restore(base, rec.bn, m.stats);
  return m;
}

}  // namespace

void register_task(TaskBank& bank, const Network& base, TaskRecord record,
                   const Tensor<float>* probe_images) {
  if (record.task_id.empty() || record.task_id.find('/') != std::string::npos)
    fail(Errc::InvalidArgument, "task id must be non-empty and must not contain '/'");
  if (bank.has(record.task_id)) fail(Errc::DuplicateTask, "task '" + record.task_id + "' already registered");
  if (bank.base_hash != base.content_hash())
    fail(Errc::BaseHashMismatch, "bank was created for a different base model");
  for (const auto& [layer, grid] : record.grids) {
    std::vector<int> w4 = base.modulated_weight_shape(layer);  // throws on unknown layer
    std::vector<int> want;
    if (record.method == Method::Mask) {
      want = w4;
    } else {
      want = grid_shape_for(w4, record.spec);
    }
    if (grid.shape != want)
      fail(Errc::ShapeMismatch, "grid for '" + layer + "' has shape " + shape_str(grid.shape) +
                                    ", geometry requires " + shape_str(want));
  }
  if (record.head_w.rank() != 2 || record.head_w.shape[0] != record.class_count ||
      record.head_w.shape[1] != base.arch.fc_dim ||
      record.head_b.shape != std::vector<int>{record.class_count})
    fail(Errc::ShapeMismatch, "head shape does not match base geometry / class count");
  if (record.bn.entries.size() != base.bn.size())
    fail(Errc::ShapeMismatch, "bn snapshot entry count mismatch");
  if (probe_images)
    record.probe_hash = logits_hash(activate_record(base, record).logits(*probe_images));
  bank.records.push_back(std::move(record));
}

ActiveModel activate_task(const TaskBank& bank, const Network& base, const std::string& task_id) {
  if (bank.base_hash != base.content_hash())
    fail(Errc::BaseHashMismatch, "live base model does not match the bank's recorded hash");
  return activate_record(base, bank.find(task_id));
}

Tensor<float> ActiveModel::logits(const Tensor<float>& images) const {
  Tape<float> tape;
  BoundModel bm;
  bm.net = net;
  bm.mode = Mode::Eval;
  bm.stats = &stats;
  for (size_t i = 0; i < net->conv_w.size(); ++i) {
    bm.conv_w.push_back(tape.constant(net->conv_w[i]));
    bm.conv_b.push_back(tape.constant(net->conv_b[i]));
    bm.bn_gamma.push_back(tape.constant(net->bn[i].gamma));
    bm.bn_beta.push_back(tape.constant(net->bn[i].beta));
  }
  bm.fc_w = tape.constant(net->fc_w);
  bm.fc_b = tape.constant(net->fc_b);
  bm.head_w = tape.constant(head_w);
  bm.head_b = tape.constant(head_b);
  std::vector<std::string> ids = net->modulated_layer_ids();
  bm.adapters.resize(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    auto it = factors.find(ids[i]);
    if (it == factors.end()) continue;
    LayerAdapter& ad = bm.adapters[i];
    ad.kind = LayerAdapter::Kind::Grid;
    ad.param = tape.constant(it->second);
    // masks are stored at full resolution, so the grid path is an identity
    // expansion for them; the method only matters for real low-res grids
    ad.method = method == Method::Mask ? InterpMethod::Nearest : spec.method;
  }
  Var<float> x = tape.constant(images);
  ForwardOut out = model_forward(tape, bm, x);
  return tape.val(out.logits);
}

uint64_t logits_hash(const Tensor<float>& logits) { return tensor_hash(logits); }

namespace {

int64_t head_bn_bits(const TaskRecord& record) {
  int64_t bits = 32 * (record.head_w.numel() + record.head_b.numel());
  for (const auto& e : record.bn.entries) bits += 32 * (e.mean.numel() + e.var.numel());
  return bits;
}

}  // namespace

int64_t storage_bits(const TaskRecord& record, const Network& base, int precision_bits) {
  (void)base;
  int64_t bits = head_bn_bits(record);
  if (record.method == Method::Mask) {
    for (const auto& [layer, grid] : record.grids) bits += grid.numel();  // 1 bit per weight
  } else {
    for (const auto& [layer, grid] : record.grids) bits += grid.numel() * precision_bits;
  }
  return bits;
}

int64_t mask_storage_bits(const Network& base, int class_count) {
  int64_t bits = base.modulated_weight_count();  // 1 bit per weight
  bits += 32 * ((int64_t)class_count * base.arch.fc_dim + class_count);
  for (const BnParams& b : base.bn)
    bits += 32 * (b.running_mean.numel() + b.running_var.numel());
  return bits;
}

double parity_ratio(const TaskRecord& record, const Network& base, int precision_bits) {
  int64_t grid_bits = 0;
  for (const auto& [layer, grid] : record.grids)
    grid_bits += grid.numel() * (record.method == Method::Mask ? 1 : precision_bits);
  return (double)grid_bits / (double)base.modulated_weight_count();
}

// ---- serialization -------------------------------------------------------

void save_bank(const TaskBank& bank, const std::string& path) {
  ContainerWriter w;
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskRecord& rec : bank.records) {
    nlohmann::json t = {{"id", rec.task_id},
                        {"method", method_name(rec.method)},
                        {"m1", rec.spec.m1},
                        {"m2", rec.spec.m2},
                        {"interp", interp_name(rec.spec.method)},
                        {"classes", rec.class_count}};
    t["probe_hash"] = rec.probe_hash ? nlohmann::json(hash_to_hex(*rec.probe_hash))
                                     : nlohmann::json(nullptr);
    tasks.push_back(t);
    std::string pre = "task/" + rec.task_id + "/";
    for (const auto& [layer, grid] : rec.grids) w.put_f16(pre + "grid/" + layer, grid.shape, grid.bits);
    w.put_f32(pre + "head_w", rec.head_w);
    w.put_f32(pre + "head_b", rec.head_b);
    for (const auto& e : rec.bn.entries) {
      w.put_f32(pre + "bn/" + e.layer_id + "/mean", e.mean);
      w.put_f32(pre + "bn/" + e.layer_id + "/var", e.var);
    }
  }
  w.meta = {{"kind", "bank"}, {"base_hash", hash_to_hex(bank.base_hash)}, {"tasks", tasks}};
  w.write(path, kMagicBank);
}

TaskBank load_bank(const std::string& path) {
  Container c = Container::read(path, kMagicBank);
  if (c.meta.value("kind", "") != "bank") fail(Errc::BadConfig, "container is not a task bank");
  TaskBank bank;
  bank.base_hash = hex_to_hash(c.meta.at("base_hash").get<std::string>());
  for (const auto& t : c.meta.at("tasks")) {
    TaskRecord rec;
    rec.task_id = t.at("id").get<std::string>();
    rec.method = method_from_name(t.at("method").get<std::string>());
    rec.spec.m1 = t.at("m1").get<int>();
    rec.spec.m2 = t.at("m2").get<int>();
    rec.spec.method = interp_from_name(t.at("interp").get<std::string>());
    rec.class_count = t.at("classes").get<int>();
    if (!t.at("probe_hash").is_null())
      rec.probe_hash = hex_to_hash(t.at("probe_hash").get<std::string>());
    std::string pre = "task/" + rec.task_id + "/";
    for (const std::string& name : c.names_with_prefix(pre + "grid/")) {
      GridData g;
      c.f16(name, g.shape, g.bits);
      rec.grids[name.substr(pre.size() + 5)] = std::move(g);
    }
    rec.head_w = c.f32(pre + "head_w");
    rec.head_b = c.f32(pre + "head_b");
    std::vector<std::string> means = c.names_with_prefix(pre + "bn/");
    std::sort(means.begin(), means.end());
    for (const std::string& name : means) {
      if (name.size() < 5 || name.substr(name.size() - 5) != "/mean") continue;
      std::string layer = name.substr(pre.size() + 3, name.size() - pre.size() - 3 - 5);
      BNSnapshot::Entry e;
      e.layer_id = layer;
      e.mean = c.f32(name);
      e.var = c.f32(pre + "bn/" + layer + "/var");
      rec.bn.entries.push_back(std::move(e));
    }
    bank.records.push_back(std::move(rec));
  }
  return bank;
}

void save_checkpoint(const Network& net, const std::string& path) {
  ContainerWriter w;
  for (size_t i = 0; i < net.conv_w.size(); ++i) {
    std::string ci = "conv" + std::to_string(i);
    w.put_f32(ci + ".w", net.conv_w[i]);
    w.put_f32(ci + ".b", net.conv_b[i]);
    std::string bi = "bn" + std::to_string(i);
    w.put_f32(bi + ".gamma", net.bn[i].gamma);
    w.put_f32(bi + ".beta", net.bn[i].beta);
    w.put_f32(bi + ".mean", net.bn[i].running_mean);
    w.put_f32(bi + ".var", net.bn[i].running_var);
  }
  w.put_f32("fc.w", net.fc_w);
  w.put_f32("fc.b", net.fc_b);
  w.put_f32("head.w", net.head_w);
  w.put_f32("head.b", net.head_b);
  nlohmann::json convs = nlohmann::json::array();
  for (const ConvSpec& c : net.arch.convs)
    convs.push_back({c.cin, c.cout, c.k, c.stride, c.pad, c.groups});
  w.meta = {{"kind", "checkpoint"},
            {"arch",
             {{"in_channels", net.arch.in_channels},
              {"image_size", net.arch.image_size},
              {"num_classes", net.arch.num_classes},
              {"fc_dim", net.arch.fc_dim},
              {"convs", convs}}},
            {"hash", hash_to_hex(net.content_hash())}};
  w.write(path, kMagicCheckpoint);
}

Network load_checkpoint(const std::string& path) {
  Container c = Container::read(path, kMagicCheckpoint);
  if (c.meta.value("kind", "") != "checkpoint")
    fail(Errc::BadConfig, "container is not a checkpoint");
  const nlohmann::json& a = c.meta.at("arch");
  Network net;
  net.arch.in_channels = a.at("in_channels").get<int>();
  net.arch.image_size = a.at("image_size").get<int>();
  net.arch.num_classes = a.at("num_classes").get<int>();
  net.arch.fc_dim = a.at("fc_dim").get<int>();
  for (const auto& jc : a.at("convs")) {
    ConvSpec cs;
    cs.cin = jc.at(0).get<int>();
    cs.cout = jc.at(1).get<int>();
    cs.k = jc.at(2).get<int>();
    cs.stride = jc.at(3).get<int>();
    cs.pad = jc.at(4).get<int>();
    cs.groups = jc.at(5).get<int>();
    net.arch.convs.push_back(cs);
  }
  for (size_t i = 0; i < net.arch.convs.size(); ++i) {
    std::string ci = "conv" + std::to_string(i);
    net.conv_w.push_back(c.f32(ci + ".w"));
    net.conv_b.push_back(c.f32(ci + ".b"));
    std::string bi = "bn" + std::to_string(i);
    BnParams bn;
    bn.gamma = c.f32(bi + ".gamma");
    bn.beta = c.f32(bi + ".beta");
    bn.running_mean = c.f32(bi + ".mean");
    bn.running_var = c.f32(bi + ".var");
    net.bn.push_back(std::move(bn));
  }
  net.fc_w = c.f32("fc.w");
  net.fc_b = c.f32("fc.b");
  net.head_w = c.f32("head.w");
  net.head_b = c.f32("head.b");
  uint64_t stored = hex_to_hash(c.meta.at("hash").get<std::string>());
  if (stored != net.content_hash())
    fail(Errc::BaseHashMismatch, "checkpoint content does not match its recorded hash");
  return net;
}

}  // namespace zfcl
