#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "zfcl/rng.hpp"
#include "zfcl/task_bank.hpp"
#include "zfcl/trainer.hpp"

using namespace zfcl;

namespace {

Network make_net(uint64_t seed = 42) { return Network::init(Arch::small_cnn(1, 8, 3), seed); }

Tensor<float> random_images(int n, int hw, Rng& rng) {
  Tensor<float> t = Tensor<float>::zeros({n, 1, hw, hw});
  for (auto& v : t.data) v = (float)rng.uniform(0.0, 1.0);
  return t;
}

TaskRecord make_record(const Network& net, const std::string& id, const ModulationSpec& spec,
                       uint64_t seed) {
  Rng rng(seed);
  TaskRecord rec;
  rec.task_id = id;
  rec.method = Method::Zfcl;
  rec.spec = spec;
  for (const std::string& layer : net.modulated_layer_ids()) {
    Tensor<float> g = Tensor<float>::ones(grid_shape_for(net.modulated_weight_shape(layer), spec));
    for (auto& v : g.data) v = (float)rng.uniform(0.7, 1.3);
    rec.grids[layer] = quantize_f16(g);
  }
  rec.class_count = 3;
  rec.head_w = Tensor<float>::zeros({3, net.arch.fc_dim});
  rec.head_b = Tensor<float>::zeros({3});
  init_linear_uniform(rec.head_w, rec.head_b, rng);
  rec.bn = bn_snapshot(net, BnStats::from(net));
  return rec;
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write((const char*)bytes.data(), (std::streamsize)bytes.size());
}

const std::string kTmp = "/tmp/zfcl_bank_tests";

}  // namespace

TEST_CASE("register preserves order, rejects duplicates") {
  Network net = make_net();
  TaskBank bank = make_bank(net);
  ModulationSpec spec{2, 2, InterpMethod::Bicubic};
  register_task(bank, net, make_record(net, "a", spec, 1));
  register_task(bank, net, make_record(net, "b", spec, 2));
  register_task(bank, net, make_record(net, "c", spec, 3));
  REQUIRE(bank.records.size() == 3);
  CHECK(bank.records[0].task_id == "a");
  CHECK(bank.records[2].task_id == "c");
  try {
    register_task(bank, net, make_record(net, "b", spec, 4));
    FAIL("expected duplicate");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::DuplicateTask);
  }
}

TEST_CASE("register rejects wrong grid shapes") {
  Network net = make_net();
  TaskBank bank = make_bank(net);
  TaskRecord rec = make_record(net, "bad", ModulationSpec{2, 2, InterpMethod::Bicubic}, 1);
  rec.grids["conv0"].shape[0] += 1;
  rec.grids["conv0"].bits.resize((size_t)Tensor<float>::numel_of(rec.grids["conv0"].shape));
  CHECK_THROWS_AS(register_task(bank, net, std::move(rec)), Error);
}

TEST_CASE("activation is pure and unaffected by later registrations") {
  Network net = make_net();
  Rng rng(9);
  Tensor<float> probe = random_images(6, 8, rng);
  TaskBank bank = make_bank(net);
  ModulationSpec spec{2, 2, InterpMethod::Bicubic};
  register_task(bank, net, make_record(net, "t1", spec, 1));
  Tensor<float> first = activate_task(bank, net, "t1").logits(probe);
  Tensor<float> again = activate_task(bank, net, "t1").logits(probe);
  for (int64_t i = 0; i < first.numel(); ++i) CHECK(first[i] == again[i]);

  register_task(bank, net, make_record(net, "t2", spec, 2));
  register_task(bank, net, make_record(net, "t3", spec, 3));
  Tensor<float> after = activate_task(bank, net, "t1").logits(probe);
  for (int64_t i = 0; i < first.numel(); ++i) CHECK(first[i] == after[i]);

  // A -> B -> A
  Tensor<float> b1 = activate_task(bank, net, "t2").logits(probe);
  Tensor<float> a2 = activate_task(bank, net, "t1").logits(probe);
  Tensor<float> b2 = activate_task(bank, net, "t2").logits(probe);
  for (int64_t i = 0; i < first.numel(); ++i) {
    CHECK(a2[i] == first[i]);
    CHECK(b1[i] == b2[i]);
  }
}

TEST_CASE("perturbed base model fails the hash check") {
  Network net = make_net();
  TaskBank bank = make_bank(net);
  register_task(bank, net, make_record(net, "t", ModulationSpec{2, 2, InterpMethod::Bicubic}, 1));
  Network tampered = net;
  tampered.conv_w[0][0] += 1e-3f;
  try {
    activate_task(bank, tampered, "t");
    FAIL("expected hash mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BaseHashMismatch);
  }
  CHECK_THROWS_AS(activate_task(bank, net, "nope"), Error);
}

TEST_CASE("storage accounting: parity at m1*m2=16 with 16-bit precision") {
  // conv 32->64 k3 (the worked example) plus a divisible trunk fc
  Arch arch;
  arch.in_channels = 32;
  arch.image_size = 8;
  arch.num_classes = 4;
  arch.convs = {{32, 64, 3, 1, 1, 1}};
  arch.fc_dim = 32;
  Network net = Network::init(arch, 1);

  auto grid_count = [&](const ModulationSpec& spec) {
    TaskRecord rec;
    int64_t n = 0;
    for (const std::string& layer : net.modulated_layer_ids())
      n += Tensor<float>::numel_of(grid_shape_for(net.modulated_weight_shape(layer), spec));
    return n;
  };
  // conv weights 64*32*9 = 18432; (4,4) grid = 16*8*9 = 1152 on the conv
  ModulationSpec s44{4, 4, InterpMethod::Bicubic};
  ModulationSpec s28{2, 8, InterpMethod::Bicubic};
  int64_t conv_weights = 64 * 32 * 9;
  CHECK(net.conv_w[0].numel() == conv_weights);
  CHECK(Tensor<float>::numel_of(grid_shape_for({64, 32, 3, 3}, s44)) == 1152);
  CHECK(1152 * 16 == conv_weights);

  // full records agree exactly between (4,4) and (2,8), and match mask bits
  TaskRecord r44 = make_record(net, "a", s44, 1);
  TaskRecord r28 = make_record(net, "b", s28, 1);
  r44.class_count = r28.class_count = 4;
  r44.head_w = r28.head_w = Tensor<float>::zeros({4, arch.fc_dim});
  r44.head_b = r28.head_b = Tensor<float>::zeros({4});
  int64_t bits44 = storage_bits(r44, net, 16);
  int64_t bits28 = storage_bits(r28, net, 16);
  CHECK(bits44 == bits28);
  CHECK(bits44 == mask_storage_bits(net, 4));
  CHECK(grid_count(s44) == grid_count(s28));

  // (2,2) costs 4x the mask
  TaskRecord r22 = make_record(net, "c", ModulationSpec{2, 2, InterpMethod::Bicubic}, 1);
  CHECK(parity_ratio(r22, net, 16) == doctest::Approx(4.0));

  // strictly decreasing in m1*m2 on divisible geometry
  int64_t prev = -1;
  for (int m : {1, 2, 4, 8}) {
    int64_t n = grid_count(ModulationSpec{m, m, InterpMethod::Bicubic});
    if (prev > 0) CHECK(n < prev);
    prev = n;
  }
}

TEST_CASE("mask record storage: 1 bit per weight plus head and bn") {
  Network net = make_net();
  TaskRecord rec;
  rec.task_id = "m";
  rec.method = Method::Mask;
  for (const std::string& layer : net.modulated_layer_ids()) {
    Tensor<float> mask = Tensor<float>::ones(net.modulated_weight_shape(layer));
    rec.grids[layer] = quantize_f16(mask);
  }
  rec.class_count = 3;
  rec.head_w = Tensor<float>::zeros({3, net.arch.fc_dim});
  rec.head_b = Tensor<float>::zeros({3});
  rec.bn = bn_snapshot(net, BnStats::from(net));
  CHECK(storage_bits(rec, net, 16) == mask_storage_bits(net, 3));
}

TEST_CASE("bank save/load/save is byte-identical and activations survive") {
  std::filesystem::create_directories(kTmp);
  Network net = make_net();
  Rng rng(15);
  Tensor<float> probe = random_images(5, 8, rng);
  TaskBank bank = make_bank(net);
  ModulationSpec spec{2, 4, InterpMethod::NearestExact};
  register_task(bank, net, make_record(net, "t1", spec, 1), &probe);
  register_task(bank, net, make_record(net, "t2", spec, 2), &probe);
  register_task(bank, net, make_record(net, "t3", spec, 3), &probe);

  std::vector<Tensor<float>> before;
  for (const char* id : {"t1", "t2", "t3"})
    before.push_back(activate_task(bank, net, id).logits(probe));

  std::string p1 = kTmp + "/bank1.zfcb";
  std::string p2 = kTmp + "/bank2.zfcb";
  save_bank(bank, p1);
  TaskBank loaded = load_bank(p1);
  save_bank(loaded, p2);
  CHECK(slurp(p1) == slurp(p2));

  CHECK(loaded.base_hash == bank.base_hash);
  REQUIRE(loaded.records.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(loaded.records[i].task_id == bank.records[i].task_id);
    CHECK(loaded.records[i].probe_hash == bank.records[i].probe_hash);
  }
  std::vector<Tensor<float>> after;
  for (const char* id : {"t1", "t2", "t3"})
    after.push_back(activate_task(loaded, net, id).logits(probe));
  for (size_t k = 0; k < 3; ++k)
    for (int64_t i = 0; i < before[k].numel(); ++i) CHECK(before[k][i] == after[k][i]);
}

TEST_CASE("bank load failure modes are distinct") {
  std::filesystem::create_directories(kTmp);
  Network net = make_net();
  TaskBank bank = make_bank(net);
  register_task(bank, net, make_record(net, "t", ModulationSpec{2, 2, InterpMethod::Bicubic}, 1));
  std::string path = kTmp + "/bank_err.zfcb";
  save_bank(bank, path);
  std::vector<uint8_t> good = slurp(path);

  // truncated payload
  std::vector<uint8_t> cut(good.begin(), good.end() - 7);
  spit(kTmp + "/trunc.zfcb", cut);
  try {
    load_bank(kTmp + "/trunc.zfcb");
    FAIL("expected truncated");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Truncated);
  }

  // wrong magic
  std::vector<uint8_t> wrong = good;
  wrong[0] = 'X';
  spit(kTmp + "/magic.zfcb", wrong);
  try {
    load_bank(kTmp + "/magic.zfcb");
    FAIL("expected bad magic");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BadMagic);
  }

  // wrong version
  std::vector<uint8_t> badver = good;
  badver[4] = 99;
  spit(kTmp + "/ver.zfcb", badver);
  try {
    load_bank(kTmp + "/ver.zfcb");
    FAIL("expected bad version");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BadVersion);
  }

  // base hash mismatch comes from activation against a different model
  TaskBank loaded = load_bank(path);
  Network other = make_net(777);
  try {
    activate_task(loaded, other, "t");
    FAIL("expected hash mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BaseHashMismatch);
  }
}

TEST_CASE("checkpoint save/load round trip") {
  std::filesystem::create_directories(kTmp);
  Network net = make_net(101);
  std::string path = kTmp + "/base.zfck";
  save_checkpoint(net, path);
  Network loaded = load_checkpoint(path);
  CHECK(loaded.content_hash() == net.content_hash());
  Rng rng(3);
  Tensor<float> probe = random_images(4, 8, rng);
  Tensor<float> a = network_logits(net, probe);
  Tensor<float> b = network_logits(loaded, probe);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

  // flipped tensor byte -> recorded hash no longer matches
  std::vector<uint8_t> bytes = slurp(path);
  bytes[bytes.size() - 1] ^= 0x40;
  spit(kTmp + "/base_bad.zfck", bytes);
  try {
    load_checkpoint(kTmp + "/base_bad.zfck");
    FAIL("expected hash mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BaseHashMismatch);
  }
}

TEST_CASE("f16 quantize/dequantize round trip is exact for f16 values") {
  Rng rng(21);
  Tensor<float> t = Tensor<float>::zeros({3, 3});
  for (auto& v : t.data) v = f16_to_f32(f32_to_f16((float)rng.uniform(-2.0, 2.0)));
  GridData g = quantize_f16(t);
  Tensor<float> back = dequantize_f16(g);
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
  GridData g2 = quantize_f16(back);
  CHECK(g2.bits == g.bits);
}
