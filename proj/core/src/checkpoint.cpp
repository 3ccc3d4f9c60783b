#include "fsaa/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "fsaa/errors.hpp"

namespace fsaa {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + 4);
  }
  void f32s(std::span<const float> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes.insert(bytes.end(), p, p + values.size() * 4);
  }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void f32s(std::span<float> out, const char* what) {
    need(out.size() * 4, what);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * 4);
    pos_ += out.size() * 4;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  [[noreturn]] void fail(const std::string& message) const { throw LoadError(source_ + ": " + message); }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) fail(std::string("truncated while reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  uLong value = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; checkpoints stay far below 4 GiB.
  value = crc32(value, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(value);
}

void write_config(Writer& w, const ModelConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.input_channels));
  w.u32(static_cast<std::uint32_t>(c.input_size));
  w.u32(static_cast<std::uint32_t>(c.feature_channels));
  w.u32(static_cast<std::uint32_t>(c.spp_levels.size()));
  for (std::size_t l : c.spp_levels) w.u32(static_cast<std::uint32_t>(l));
  w.u32(static_cast<std::uint32_t>(c.combine_mode));
  w.u32(c.classifier_enabled ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(c.map_activation));
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.input_channels = r.u32("input_channels");
  c.input_size = r.u32("input_size");
  c.feature_channels = r.u32("feature_channels");
  const std::uint32_t levels = r.u32("level count");
  if (levels > 64) r.fail("implausible SPP level count " + std::to_string(levels));
  c.spp_levels.clear();
  for (std::uint32_t i = 0; i < levels; ++i) c.spp_levels.push_back(r.u32("SPP level"));
  const std::uint32_t mode = r.u32("combine mode");
  if (mode > 1) r.fail("unknown combine mode " + std::to_string(mode));
  c.combine_mode = static_cast<CombineMode>(mode);
  const std::uint32_t ac = r.u32("classifier flag");
  if (ac > 1) r.fail("bad classifier flag " + std::to_string(ac));
  c.classifier_enabled = ac == 1;
  const std::uint32_t act = r.u32("map activation");
  if (act != 0) r.fail("unknown map activation " + std::to_string(act));
  c.map_activation = MapActivation::sigmoid;
  return c;
}

void write_entry(Writer& w, const std::string& name, const Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.raw(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(t.data());
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& config, const ModelParams<float>& params) {
  Writer w;
  w.raw("FSAA");
  w.u32(kCheckpointVersion);
  write_config(w, config);
  const auto trainable = params.trainable();
  const auto buffers = params.buffers();
  w.u32(static_cast<std::uint32_t>(trainable.size() + buffers.size()));
  for (const auto& [name, t] : trainable) write_entry(w, name, t);
  for (const auto& [name, t] : buffers) write_entry(w, name, t);
  w.u32(crc(w.bytes));
  return std::move(w.bytes);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.raw(4, "magic") != "FSAA") r.fail("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 12) r.fail("truncated");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc(bytes.first(bytes.size() - 4)) != stored_crc) r.fail("checksum mismatch");

  Checkpoint ck;
  ck.config = read_config(r);
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid stored config: ") + e.what());
  }
  ck.params = ModelParams<float>::init(ck.config, 0);

  std::map<std::string, Tensor<float>> trainable;
  for (auto& [name, t] : ck.params.trainable()) trainable.emplace(name, t);
  std::map<std::string, Shape> buffers;
  for (auto& [name, t] : ck.params.buffers()) buffers.emplace(name, t.shape());

  const std::uint32_t count = r.u32("entry count");
  std::map<std::string, bool> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = r.u32("name length");
    if (name_len > 4096) r.fail("implausible name length");
    const std::string name = r.raw(name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) r.fail("implausible rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dimension"));
    if (seen[name]) r.fail("duplicate entry " + name);
    seen[name] = true;

    const auto expect = [&](const Shape& want) {
      if (shape != want)
        r.fail("entry " + name + " has shape " + shape_str(shape) + ", config expects " + shape_str(want));
    };
    if (auto it = trainable.find(name); it != trainable.end()) {
      expect(it->second.shape());
      r.f32s(it->second.mutable_data(), name.c_str());
    } else if (auto b = buffers.find(name); b != buffers.end()) {
      expect(b->second);
      std::vector<float> values(shape_numel(shape));
      r.f32s(values, name.c_str());
      ck.params.set_buffer(name, values);
    } else {
      r.fail("unknown entry " + name);
    }
  }
  for (const auto& [name, t] : trainable)
    if (!seen[name]) r.fail("missing entry " + name);
  for (const auto& [name, s] : buffers)
    if (!seen[name]) r.fail("missing entry " + name);
  if (r.remaining() != 4) r.fail("trailing bytes after entries");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams<float>& params) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(config, params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

std::uint32_t config_hash(const ModelConfig& config) {
  Writer w;
  write_config(w, config);
  return crc(w.bytes);
}

}  // namespace fsaa
