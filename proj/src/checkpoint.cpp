#include "asge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <openssl/sha.h>

namespace asge {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'A', 'S', 'G', 'E'};

enum RecordKind : std::uint8_t { kF32 = 0, kF64 = 1, kHead = 2, kBlob = 3 };

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(path_ + ": truncated while reading " + what + " (need " + std::to_string(n) +
                        " bytes at offset " + std::to_string(pos_) + ", file has " +
                        std::to_string(bytes_.size()) + ")");
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  void raw(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

template <typename Scalar>
void put_tensor(Writer& w, const std::string& name, const Tensor<Scalar>& t) {
  w.str(name);
  w.u8(std::is_same_v<Scalar, float> ? kF32 : kF64);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) {
    if constexpr (std::is_same_v<Scalar, float>) {
      w.u32(std::bit_cast<std::uint32_t>(t[i]));
    } else {
      w.u64(std::bit_cast<std::uint64_t>(t[i]));
    }
  }
}

struct Record {
  RecordKind kind;
  Tensor<float> f32;
  Tensor<double> f64;
  std::uint64_t seed = 0;
  std::uint32_t in_dim = 0, n_classes = 0;
  std::string blob;
};

Record read_record(Reader& r) {
  Record rec;
  rec.kind = static_cast<RecordKind>(r.u8("record kind"));
  switch (rec.kind) {
    case kF32:
    case kF64: {
      const std::uint32_t ndim = r.u32("tensor rank");
      if (ndim == 0 || ndim > 8) throw FormatError(r.path() + ": bad tensor rank " + std::to_string(ndim));
      Shape shape;
      for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(r.u32("tensor dims"));
      for (Index d : shape) {
        if (d < 1) throw FormatError(r.path() + ": zero tensor extent");
      }
      const Index n = shape_numel(shape);
      r.need(static_cast<std::size_t>(n) * (rec.kind == kF32 ? 4 : 8), "tensor data");
      if (rec.kind == kF32) {
        rec.f32 = Tensor<float>(shape);
        for (Index i = 0; i < n; ++i) rec.f32[i] = std::bit_cast<float>(r.u32("tensor data"));
      } else {
        rec.f64 = Tensor<double>(shape);
        for (Index i = 0; i < n; ++i) rec.f64[i] = std::bit_cast<double>(r.u64("tensor data"));
      }
      break;
    }
    case kHead:
      rec.seed = r.u64("head seed");
      rec.in_dim = r.u32("head in_dim");
      rec.n_classes = r.u32("head n_classes");
      break;
    case kBlob: {
      const std::uint64_t n = r.u64("blob length");
      r.need(n, "blob");
      rec.blob.resize(n);
      r.raw(rec.blob.data(), n, "blob");
      break;
    }
    default:
      throw FormatError(r.path() + ": unknown record kind " + std::to_string(int(rec.kind)));
  }
  return rec;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

ArchHash read_header(Reader& r) {
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(r.path() + ": bad magic, not an ASGE checkpoint");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(r.path() + ": unsupported checkpoint version " + std::to_string(version));
  }
  ArchHash hash;
  r.raw(hash.data(), hash.size(), "arch hash");
  return hash;
}

void put_state(Writer& w, std::map<std::string, std::int64_t>& steps, const std::string& name,
               const ParamState<float>& s) {
  put_tensor(w, name + ".m", s.first);
  put_tensor(w, name + ".v", s.second);
  steps[name] = s.step;
}

std::uint64_t fnv_tensor(std::uint64_t h, const Tensor<float>& t) {
  for (Index i = 0; i < t.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace

ArchHash arch_hash(const ArchSpec& spec) {
  const std::string canonical = arch_to_json(spec).dump();
  ArchHash out;
  SHA256(reinterpret_cast<const unsigned char*>(canonical.data()), canonical.size(), out.data());
  return out;
}

std::string to_hex(const ArchHash& hash) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (std::uint8_t b : hash) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const Network<float>& net = ckpt.network;
  Writer body;
  std::uint32_t count = 0;
  std::map<std::string, std::int64_t> steps;
  Writer records;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    const std::string p = "layer" + std::to_string(i);
    put_tensor(records, p + ".weight", layer.params.weights);
    put_tensor(records, p + ".bias", layer.params.bias);
    put_state(records, steps, p + ".weight", layer.weight_state);
    put_state(records, steps, p + ".bias", layer.bias_state);
    records.str(p + ".head");
    records.u8(kHead);
    records.u64(layer.head.seed());
    records.u32(static_cast<std::uint32_t>(layer.head.in_dim()));
    records.u32(static_cast<std::uint32_t>(layer.head.n_classes()));
    count += 7;
  }
  if (net.classifier) {
    put_tensor(records, "classifier.weight", net.classifier->weights);
    put_tensor(records, "classifier.bias", net.classifier->bias);
    put_state(records, steps, "classifier.weight", net.classifier->weight_state);
    put_state(records, steps, "classifier.bias", net.classifier->bias_state);
    count += 6;
  }
  if (!ckpt.accumulator.loss_sums.empty()) {
    Tensor<double> sums({static_cast<Index>(ckpt.accumulator.loss_sums.size())});
    for (std::size_t i = 0; i < ckpt.accumulator.loss_sums.size(); ++i) {
      sums[static_cast<Index>(i)] = ckpt.accumulator.loss_sums[i];
    }
    put_tensor(records, "epoch.loss_sums", sums);
    ++count;
  }
  Json meta{{"arch", arch_to_json(net.spec)},
            {"seed", net.seed},
            {"position", Json{{"epoch", ckpt.position.epoch},
                              {"batch", ckpt.position.batch},
                              {"global_step", ckpt.position.global_step}}},
            {"optimizer_steps", steps},
            {"accumulator", Json{{"classifier_loss_sum", std::bit_cast<std::uint64_t>(ckpt.accumulator.classifier_loss_sum)},
                                 {"samples", ckpt.accumulator.samples}}},
            {"rng", Json{{"root_seed", net.seed},
                         {"streams", {"init", "projection", "split", "augment", "batch-order"}},
                         {"epoch", ckpt.position.epoch},
                         {"batch", ckpt.position.batch}}},
            {"best_layer", net.best_layer ? Json(*net.best_layer) : Json(nullptr)},
            {"best_val_acc", ckpt.best_val_acc},
            {"best_epoch", ckpt.best_epoch},
            {"last_val_acc", ckpt.last_val_acc ? Json(*ckpt.last_val_acc) : Json(nullptr)},
            {"training", ckpt.training}};
  const std::string meta_text = meta.dump();
  records.str("meta");
  records.u8(kBlob);
  records.u64(meta_text.size());
  records.raw(meta_text.data(), meta_text.size());
  ++count;

  body.raw(kMagic, 4);
  body.u32(kCheckpointVersion);
  const ArchHash hash = arch_hash(net.spec);
  body.raw(hash.data(), hash.size());
  body.u32(count);
  body.raw(records.bytes().data(), records.bytes().size());

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(body.bytes().data()), static_cast<std::streamsize>(body.bytes().size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

ArchHash read_checkpoint_hash(const fs::path& path) {
  std::vector<std::uint8_t> bytes = read_bytes(path);
  if (bytes.size() > 40) bytes.resize(40);
  Reader r(std::move(bytes), path.string());
  return read_header(r);
}

Checkpoint load_checkpoint(const fs::path& path) {
  Reader r(read_bytes(path), path.string());
  const ArchHash stored = read_header(r);
  const std::uint32_t count = r.u32("record count");
  std::map<std::string, Record> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("record name");
    records.emplace(std::move(name), read_record(r));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after the last record");

  auto find = [&](const std::string& name, RecordKind kind) -> Record& {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError(path.string() + ": missing record '" + name + "'");
    if (it->second.kind != kind) throw FormatError(path.string() + ": record '" + name + "' has the wrong kind");
    return it->second;
  };

  Json meta;
  try {
    meta = Json::parse(find("meta", kBlob).blob);
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": bad metadata: " + e.what());
  }
  ArchSpec spec;
  try {
    spec = arch_from_json(meta.at("arch"));
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": bad architecture metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": unbuildable architecture: " + e.what());
  }
  const ArchHash computed = arch_hash(spec);
  if (computed != stored) {
    throw FormatError(path.string() + ": architecture hash mismatch, header " + to_hex(stored) + ", stored arch " +
                      to_hex(computed));
  }

  Checkpoint ckpt;
  try {
    ckpt.network = build_network<float>(spec, meta.at("seed").get<std::uint64_t>());
    const Json& steps = meta.at("optimizer_steps");
    auto load_param = [&](const std::string& name, Tensor<float>& param, ParamState<float>& state) {
      Tensor<float> value = find(name, kF32).f32;
      if (value.shape() != param.shape()) {
        throw FormatError(path.string() + ": record '" + name + "' has shape " + shape_str(value.shape()) +
                          ", architecture expects " + shape_str(param.shape()));
      }
      param = std::move(value);
      state.first = find(name + ".m", kF32).f32;
      state.second = find(name + ".v", kF32).f32;
      if (state.first.shape() != param.shape() || state.second.shape() != param.shape()) {
        throw FormatError(path.string() + ": optimizer moments for '" + name + "' have the wrong shape");
      }
      state.step = steps.at(name).get<std::int64_t>();
    };
    for (std::size_t i = 0; i < ckpt.network.layers.size(); ++i) {
      auto& layer = ckpt.network.layers[i];
      const std::string p = "layer" + std::to_string(i);
      load_param(p + ".weight", layer.params.weights, layer.weight_state);
      load_param(p + ".bias", layer.params.bias, layer.bias_state);
      const Record& head = find(p + ".head", kHead);
      if (static_cast<Index>(head.in_dim) != layer.plan.goodness_dim() ||
          static_cast<Index>(head.n_classes) != spec.n_classes) {
        throw FormatError(path.string() + ": projection head dims for " + p + " do not match the architecture");
      }
      if (head.seed != layer.head.seed()) {
        layer.head = ProjectionHead<float>(head.seed, head.in_dim, head.n_classes);
      }
    }
    if (ckpt.network.classifier) {
      load_param("classifier.weight", ckpt.network.classifier->weights, ckpt.network.classifier->weight_state);
      load_param("classifier.bias", ckpt.network.classifier->bias, ckpt.network.classifier->bias_state);
    }
    if (!meta.at("best_layer").is_null()) ckpt.network.best_layer = meta.at("best_layer").get<Index>();
    const Json& pos = meta.at("position");
    ckpt.position = TrainPosition{pos.at("epoch").get<Index>(), pos.at("batch").get<Index>(),
                                  pos.at("global_step").get<std::int64_t>()};
    if (records.count("epoch.loss_sums")) {
      const Tensor<double>& sums = find("epoch.loss_sums", kF64).f64;
      ckpt.accumulator.loss_sums.assign(sums.data(), sums.data() + sums.size());
    }
    const Json& acc = meta.at("accumulator");
    ckpt.accumulator.classifier_loss_sum = std::bit_cast<double>(acc.at("classifier_loss_sum").get<std::uint64_t>());
    ckpt.accumulator.samples = acc.at("samples").get<double>();
    ckpt.best_val_acc = meta.at("best_val_acc").get<double>();
    ckpt.best_epoch = meta.at("best_epoch").get<Index>();
    if (!meta.at("last_val_acc").is_null()) ckpt.last_val_acc = meta.at("last_val_acc").get<double>();
    ckpt.training = meta.at("training");
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": bad metadata: " + e.what());
  }
  return ckpt;
}

std::vector<std::uint64_t> parameter_checksums(const Network<float>& net) {
  std::vector<std::uint64_t> out;
  for (const auto& layer : net.layers) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    h = fnv_tensor(h, layer.params.weights);
    h = fnv_tensor(h, layer.params.bias);
    out.push_back(h);
  }
  std::uint64_t h = 0;
  if (net.classifier) {
    h = fnv_tensor(0xCBF29CE484222325ULL, net.classifier->weights);
    h = fnv_tensor(h, net.classifier->bias);
  }
  out.push_back(h);
  return out;
}

}  // namespace asge
