#include "vitkd/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vitkd/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace vitkd {

namespace {

constexpr char kMagic[4] = {'V', 'K', 'D', '1'};
constexpr const char* kMetaName = "meta.vit_config";
// image, patch, depth, dim, heads, mlp_ratio, classes, mean[3], std[3]
constexpr std::size_t kMetaSize = 13;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& origin)
      : bytes_(bytes), end_(end), origin_(origin) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void get_floats(float* dst, std::size_t count, const char* what) {
    if (count > (end_ - pos_) / sizeof(float)) truncated(what);
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > end_ - pos_) truncated(what);
  }
  [[noreturn]] void truncated(const char* what) {
    throw FormatError(origin_ + ": checkpoint truncated while reading " + what);
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const std::string& origin_;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::string checkpoint_serialize(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw ContractError("tensor name longer than 65535 bytes: " + name.substr(0, 32) + "...");
    if (t.rank() > 0xFF) throw ContractError("tensor '" + name + "' has rank above 255");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
      if (d > 0xFFFFFFFFu) throw ContractError("tensor '" + name + "' has a dimension above 2^32-1");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

Checkpoint checkpoint_deserialize(const std::string& bytes, const std::string& origin) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 3) == 0 && bytes[3] != kMagic[3]) {
    throw FormatError(origin + ": unsupported checkpoint version '" + bytes.substr(0, 4) + "' (expected VKD1)");
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(origin + ": bad magic, not a VKD1 checkpoint");
  }
  if (bytes.size() < 12) throw FormatError(origin + ": checkpoint truncated (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  const std::uint32_t actual = crc32_of(bytes.data(), body);
  if (stored != actual) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": CRC mismatch (stored %08x, computed %08x)", stored, actual);
    throw FormatError(origin + buf);
  }

  Reader r(bytes, body, origin);
  r.get_string(4, "magic");
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name = r.get_string(name_len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>("dims");
      if (d == 0) throw FormatError(origin + ": tensor '" + name + "' has a zero dimension");
      if (numel > (std::size_t{1} << 40) / d) throw FormatError(origin + ": tensor '" + name + "' is implausibly large");
      numel *= d;
    }
    std::vector<float> data(numel);
    r.get_floats(data.data(), numel, "payload");
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != body) {
    throw FormatError(origin + ": " + std::to_string(body - r.pos()) + " unexpected trailing bytes before the CRC");
  }
  return ckpt;
}

void checkpoint_save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return checkpoint_deserialize(bytes, path.string());
}

Checkpoint model_checkpoint(const VisionTransformer& model) {
  const auto& c = model.config();
  Checkpoint ckpt;
  std::vector<float> meta{static_cast<float>(c.image_size), static_cast<float>(c.patch_size),
                          static_cast<float>(c.depth),      static_cast<float>(c.dim),
                          static_cast<float>(c.heads),      static_cast<float>(c.mlp_ratio),
                          static_cast<float>(c.num_classes)};
  meta.insert(meta.end(), c.input_mean.begin(), c.input_mean.end());
  meta.insert(meta.end(), c.input_std.begin(), c.input_std.end());
  ckpt.tensors.emplace_back(kMetaName, Tensor({kMetaSize}, std::move(meta)));
  for (const auto& [name, t] : model.parameters()) ckpt.tensors.emplace_back(name, t.detach());
  return ckpt;
}

ViTConfig config_from_checkpoint(const Checkpoint& ckpt) {
  const Tensor* meta = ckpt.find(kMetaName);
  if (meta == nullptr || meta->numel() != kMetaSize) {
    throw FormatError(std::string("checkpoint has no valid '") + kMetaName + "' entry");
  }
  auto v = meta->data();
  auto field = [&](std::size_t i) {
    if (!(v[i] >= 1.0f) || v[i] != static_cast<float>(static_cast<std::size_t>(v[i]))) {
      throw FormatError(std::string("corrupt '") + kMetaName + "' entry");
    }
    return static_cast<std::size_t>(v[i]);
  };
  ViTConfig c;
  c.image_size = field(0);
  c.patch_size = field(1);
  c.depth = field(2);
  c.dim = field(3);
  c.heads = field(4);
  c.mlp_ratio = field(5);
  c.num_classes = field(6);
  for (std::size_t i = 0; i < 3; ++i) {
    c.input_mean[i] = v[7 + i];
    c.input_std[i] = v[10 + i];
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint architecture is invalid: ") + e.what());
  }
  return c;
}

void load_parameters(VisionTransformer& model, const Checkpoint& ckpt) {
  const auto params = model.parameters();
  for (const auto& [name, t] : params) {
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (src->shape() != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                        shape_str(t.shape()));
    }
  }
  for (const auto& [name, t] : params) {
    auto dst = Tensor(t).data();
    auto src = ckpt.find(name)->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::unique_ptr<VisionTransformer> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<VisionTransformer>(config_from_checkpoint(ckpt));
  load_parameters(*model, ckpt);
  return model;
}

}  // namespace vitkd
