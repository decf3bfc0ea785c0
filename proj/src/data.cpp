#include "zfcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "zfcl/container.hpp"
#include "zfcl/rng.hpp"

namespace zfcl {

Tensor<float> Dataset::gather_images(const std::vector<int64_t>& idx) const {
  int C = images.shape[1], H = images.shape[2], W = images.shape[3];
  int64_t stride = (int64_t)C * H * W;
  Tensor<float> out = Tensor<float>::zeros({(int)idx.size(), C, H, W});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.data.begin() + idx[i] * stride, stride,
                out.data.begin() + (int64_t)i * stride);
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int64_t>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[(size_t)idx[i]];
  return out;
}

Dataset Dataset::take(const std::vector<int64_t>& idx) const {
  Dataset d;
  d.images = gather_images(idx);
  d.labels = gather_labels(idx);
  d.ids.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) d.ids[i] = ids[(size_t)idx[i]];
  d.num_classes = num_classes;
  return d;
}

namespace {

// Per-class frequency signatures; cycled when there are more classes.
constexpr int kFreqTable[][2] = {{1, 0}, {0, 1}, {1, 1}, {2, 1},
                                 {1, 2}, {2, 2}, {3, 1}, {1, 3}};

float template_pixel(int cls, int y, int x, int image) {
  const auto& f = kFreqTable[cls % 8];
  double phase = 0.7 * (cls / 8 + 1) * (cls % 8);
  double v = 0.5 + 0.45 * std::sin(2.0 * 3.14159265358979323846 *
                                       (f[0] * (double)x + f[1] * (double)y) / (double)image +
                                   phase);
  return (float)v;
}

Dataset synth_split(const SynthSpec& spec, int per_class, Rng& rng, int64_t id_base) {
  int n = spec.classes * per_class;
  Dataset d;
  d.num_classes = spec.classes;
  d.images = Tensor<float>::zeros({n, 1, spec.image, spec.image});
  d.labels.resize((size_t)n);
  d.ids.resize((size_t)n);
  int64_t i = 0;
  for (int c = 0; c < spec.classes; ++c)
    for (int s = 0; s < per_class; ++s, ++i) {
      d.labels[(size_t)i] = c;
      d.ids[(size_t)i] = id_base + i;
      float* img = &d.images.data[(size_t)(i * spec.image * spec.image)];
      for (int y = 0; y < spec.image; ++y)
        for (int x = 0; x < spec.image; ++x) {
          double v = template_pixel(c, y, x, spec.image) + spec.noise * rng.uniform(-1.0, 1.0);
          img[y * spec.image + x] = (float)std::clamp(v, 0.0, 1.0);
        }
    }
  return d;
}

}  // namespace

TaskData synth_base_task(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.image < 4 || spec.train_per_class < 1 || spec.test_per_class < 1)
    fail(Errc::BadConfig, "synthetic dataset spec out of range");
  Rng rng(spec.seed);
  TaskData t;
  t.name = "base";
  t.train = synth_split(spec, spec.train_per_class, rng, 0);
  t.test = synth_split(spec, spec.test_per_class, rng, 1'000'000);
  return t;
}

Dataset synth_probe(const SynthSpec& spec, int count, uint64_t seed) {
  SynthSpec p = spec;
  p.seed = seed;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  int per_class = (count + spec.classes - 1) / spec.classes;
  Dataset d = synth_split(p, per_class, rng, 2'000'000);
  if (d.size() > count) {
    std::vector<int64_t> idx((size_t)count);
    for (int64_t i = 0; i < count; ++i) idx[(size_t)i] = i;
    d = d.take(idx);
  }
  return d;
}

Dataset rotate_dataset(const Dataset& d, double degrees) {
  int N = (int)d.size(), C = d.images.shape[1], H = d.images.shape[2], W = d.images.shape[3];
  Dataset out = d;
  double rad = degrees * 3.14159265358979323846 / 180.0;
  double cs = std::cos(rad), sn = std::sin(rad);
  double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* src = &d.images.data[(size_t)(((int64_t)n * C + c) * H * W)];
      float* dst = &out.images.data[(size_t)(((int64_t)n * C + c) * H * W)];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          // inverse map, nearest neighbor
          double sx = cs * (x - cx) + sn * (y - cy) + cx;
          double sy = -sn * (x - cx) + cs * (y - cy) + cy;
          int ix = (int)std::lround(sx);
          int iy = (int)std::lround(sy);
          dst[y * W + x] =
              (ix >= 0 && ix < W && iy >= 0 && iy < H) ? src[iy * W + ix] : 0.0f;
        }
    }
  return out;
}

Dataset permute_dataset(const Dataset& d, uint64_t seed) {
  int N = (int)d.size(), C = d.images.shape[1], H = d.images.shape[2], W = d.images.shape[3];
  std::vector<int> perm((size_t)(H * W));
  for (int i = 0; i < H * W; ++i) perm[(size_t)i] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  Dataset out = d;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* src = &d.images.data[(size_t)(((int64_t)n * C + c) * H * W)];
      float* dst = &out.images.data[(size_t)(((int64_t)n * C + c) * H * W)];
      for (int i = 0; i < H * W; ++i) dst[i] = src[perm[(size_t)i]];
    }
  return out;
}

Dataset class_subset(const Dataset& d, const std::vector<int>& keep) {
  if (keep.empty()) fail(Errc::InvalidArgument, "class subset must be non-empty");
  for (int c : keep)
    if (c < 0 || c >= d.num_classes)
      fail(Errc::InvalidArgument, "class " + std::to_string(c) + " outside dataset classes");
  std::vector<int64_t> idx;
  std::vector<int> remap((size_t)d.num_classes, -1);
  for (size_t i = 0; i < keep.size(); ++i) remap[(size_t)keep[i]] = (int)i;
  for (int64_t i = 0; i < d.size(); ++i)
    if (remap[(size_t)d.labels[(size_t)i]] >= 0) idx.push_back(i);
  if (idx.empty()) fail(Errc::EmptyDataset, "class subset selected no samples");
  Dataset out = d.take(idx);
  for (auto& l : out.labels) l = remap[(size_t)l];
  out.num_classes = (int)keep.size();
  return out;
}

TaskData rotate_task(const TaskData& base, double degrees) {
  TaskData t;
  t.name = "rotate" + std::to_string((int)std::lround(degrees));
  t.train = rotate_dataset(base.train, degrees);
  t.test = rotate_dataset(base.test, degrees);
  return t;
}

TaskData permute_task(const TaskData& base, uint64_t seed) {
  TaskData t;
  t.name = "permute" + std::to_string(seed);
  t.train = permute_dataset(base.train, seed);
  t.test = permute_dataset(base.test, seed);
  return t;
}

std::vector<TaskData> synth_tasks(const TaskData& base, int n_tasks, TaskKind kind,
                                  uint64_t seed) {
  if (n_tasks < 1) fail(Errc::InvalidArgument, "n_tasks must be >= 1");
  std::vector<TaskData> out;
  Rng rng(seed);
  if (kind == TaskKind::Rotate) {
    std::vector<int> angles = {45, 90, 135, 180, 225, 270, 315};
    rng.shuffle(angles);
    if (n_tasks > (int)angles.size())
      fail(Errc::InvalidArgument, "at most " + std::to_string(angles.size()) + " rotate tasks");
    for (int i = 0; i < n_tasks; ++i) out.push_back(rotate_task(base, angles[(size_t)i]));
  } else if (kind == TaskKind::Permute) {
    for (int i = 0; i < n_tasks; ++i) out.push_back(permute_task(base, rng.next_u64()));
  } else {
    int classes = base.train.num_classes;
    if (classes / n_tasks < 2)
      fail(Errc::InvalidArgument, "class-split needs at least 2 classes per task, have " +
                                      std::to_string(classes) + " classes for " +
                                      std::to_string(n_tasks) + " tasks");
    std::vector<int> order((size_t)classes);
    for (int i = 0; i < classes; ++i) order[(size_t)i] = i;
    rng.shuffle(order);
    int per = classes / n_tasks;
    for (int i = 0; i < n_tasks; ++i) {
      std::vector<int> keep(order.begin() + (int64_t)i * per,
                            order.begin() + (int64_t)(i + 1) * per);
      TaskData t;
      t.name = "split" + std::to_string(i);
      t.train = class_subset(base.train, keep);
      t.test = class_subset(base.test, keep);
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---- IDX ------------------------------------------------------------------

namespace {

uint32_t read_be32(const std::vector<uint8_t>& buf, size_t off, const char* what) {
  if (off + 4 > buf.size())
    fail(Errc::Truncated, std::string(what) + " truncated at byte " + std::to_string(buf.size()));
  return ((uint32_t)buf[off] << 24) | ((uint32_t)buf[off + 1] << 16) |
         ((uint32_t)buf[off + 2] << 8) | (uint32_t)buf[off + 3];
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open '" + path + "'");
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::vector<uint8_t> ib = read_file(images_path);
  if (read_be32(ib, 0, "idx image header") != 0x00000803u)
    fail(Errc::BadMagic, "'" + images_path + "' is not an idx3-ubyte image file");
  int n = (int)read_be32(ib, 4, "idx image count");
  int h = (int)read_be32(ib, 8, "idx image rows");
  int w = (int)read_be32(ib, 12, "idx image cols");
  size_t need = 16 + (size_t)n * h * w;
  if (ib.size() < need)
    fail(Errc::Truncated, "image payload ends at byte " + std::to_string(ib.size()) +
                              ", header declares " + std::to_string(need));

  std::vector<uint8_t> lb = read_file(labels_path);
  if (read_be32(lb, 0, "idx label header") != 0x00000801u)
    fail(Errc::BadMagic, "'" + labels_path + "' is not an idx1-ubyte label file");
  int nl = (int)read_be32(lb, 4, "idx label count");
  if (lb.size() < 8 + (size_t)nl)
    fail(Errc::Truncated, "label payload ends at byte " + std::to_string(lb.size()) +
                              ", header declares " + std::to_string(8 + (size_t)nl));
  if (nl != n)
    fail(Errc::ShapeMismatch, "idx label count " + std::to_string(nl) +
                                  " does not match image count " + std::to_string(n));

  Dataset d;
  d.images = Tensor<float>::zeros({n, 1, h, w});
  d.labels.resize((size_t)n);
  d.ids.resize((size_t)n);
  int max_label = 0;
  for (int i = 0; i < n; ++i) {
    d.labels[(size_t)i] = lb[(size_t)(8 + i)];
    max_label = std::max(max_label, d.labels[(size_t)i]);
    d.ids[(size_t)i] = i;
    const uint8_t* src = ib.data() + 16 + (size_t)i * h * w;
    float* dst = &d.images.data[(size_t)i * h * w];
    for (int p = 0; p < h * w; ++p) dst[p] = (float)src[p] / 255.0f;
  }
  d.num_classes = max_label + 1;
  return d;
}

void save_tensor_dataset(const TaskData& t, const std::string& path) {
  ContainerWriter w;
  auto put_split = [&](const std::string& pre, const Dataset& d) {
    w.put_f32(pre + "images", d.images);
    Tensor<float> labels = Tensor<float>::zeros({(int)d.size()});
    for (int64_t i = 0; i < d.size(); ++i) labels[i] = (float)d.labels[(size_t)i];
    w.put_f32(pre + "labels", labels);
  };
  put_split("train/", t.train);
  put_split("test/", t.test);
  w.meta = {{"kind", "tensors"}, {"name", t.name}, {"classes", t.train.num_classes}};
  w.write(path, kMagicTensors);
}

TaskData load_tensor_dataset(const std::string& path) {
  Container c = Container::read(path, kMagicTensors);
  TaskData t;
  t.name = c.meta.value("name", "data");
  int classes = c.meta.at("classes").get<int>();
  auto get_split = [&](const std::string& pre, int64_t id_base) {
    Dataset d;
    d.images = c.f32(pre + "images");
    Tensor<float> labels = c.f32(pre + "labels");
    d.labels.resize((size_t)labels.numel());
    d.ids.resize((size_t)labels.numel());
    for (int64_t i = 0; i < labels.numel(); ++i) {
      d.labels[(size_t)i] = (int)labels[i];
      d.ids[(size_t)i] = id_base + i;
    }
    d.num_classes = classes;
    return d;
  };
  t.train = get_split("train/", 0);
  t.test = get_split("test/", 1'000'000);
  return t;
}

TaskData resolve_data_spec(const std::string& spec, const SynthSpec& synth) {
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
      size_t p = s.find(sep, start);
      parts.push_back(s.substr(start, p == std::string::npos ? p : p - start));
      if (p == std::string::npos) break;
      start = p + 1;
    }
    return parts;
  };
  std::vector<std::string> parts = split(spec, ':');
  if (parts[0] == "synth") {
    TaskData base = synth_base_task(synth);
    if (parts.size() < 2 || parts[1] == "base") return base;
    if (parts[1] == "rotate" && parts.size() == 3) {
      TaskData t = rotate_task(base, std::stod(parts[2]));
      return t;
    }
    if (parts[1] == "permute" && parts.size() == 3) return permute_task(base, std::stoull(parts[2]));
    if (parts[1] == "subset" && parts.size() == 3) {
      std::vector<int> keep;
      for (const std::string& c : split(parts[2], ',')) keep.push_back(std::stoi(c));
      TaskData t;
      t.name = "subset";
      t.train = class_subset(base.train, keep);
      t.test = class_subset(base.test, keep);
      return t;
    }
    fail(Errc::BadConfig, "bad synth data spec '" + spec + "'");
  }
  if (parts[0] == "idx" && parts.size() == 2) {
    TaskData t;
    t.name = "idx";
    t.train = load_idx(parts[1] + "/train-images.idx", parts[1] + "/train-labels.idx");
    t.test = load_idx(parts[1] + "/test-images.idx", parts[1] + "/test-labels.idx");
    for (size_t i = 0; i < t.test.ids.size(); ++i) t.test.ids[i] += 1'000'000;
    t.train.num_classes = t.test.num_classes =
        std::max(t.train.num_classes, t.test.num_classes);
    return t;
  }
  if (parts[0] == "file" && parts.size() == 2) return load_tensor_dataset(parts[1]);
  fail(Errc::BadConfig, "unrecognized data spec '" + spec + "'");
}

}  // namespace zfcl
