#include "flashclear/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "flashclear/errors.hpp"

namespace flashclear {

namespace {

constexpr char kMagic[6] = {'F', 'C', 'K', 'P', 'T', '1'};
using Kind = FormatError::Kind;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os_.write(reinterpret_cast<const char*>(b), 4);
  }
  void i64(std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os_.write(reinterpret_cast<const char*>(b), 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(std::span<const float> v) {
    for (float f : v) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u32(u);
    }
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError(Kind::kTruncated, "checkpoint " + path_ + " is truncated");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::int64_t i64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<std::int64_t>(v);
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 28)) throw FormatError(Kind::kMalformed, "checkpoint " + path_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::istream& is_;
  std::string path_;
};

int to_int(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(Kind::kMalformed, "checkpoint metadata " + key + " is not an integer: '" + s + "'");
  }
}

}  // namespace

void Checkpoint::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : meta)
    if (k == key) {
      v = value;
      return;
    }
  meta.emplace_back(key, value);
}

bool Checkpoint::has(const std::string& key) const {
  for (const auto& kv : meta)
    if (kv.first == key) return true;
  return false;
}

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& kv : meta)
    if (kv.first == key) return kv.second;
  throw FormatError(Kind::kMalformed, "checkpoint has no metadata entry '" + key + "'");
}

const Tensor<float>* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& kv : tensors)
    if (kv.first == name) return &kv.second;
  return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(Kind::kIo, "cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  Writer w(os);
  w.str(ckpt.kind);
  w.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) w.i64(d);
    w.floats(t.data);
  }
  if (!os) throw FormatError(Kind::kIo, "failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(Kind::kIo, "cannot open checkpoint " + path.string());
  char magic[6];
  is.read(magic, 6);
  if (is.gcount() != 6) throw FormatError(Kind::kTruncated, "checkpoint " + path.string() + " is truncated");
  if (std::memcmp(magic, kMagic, 5) != 0)
    throw FormatError(Kind::kBadMagic, path.string() + " is not a checkpoint file");
  if (magic[5] != kMagic[5])
    throw FormatError(Kind::kVersion, "unsupported checkpoint version '" + std::string(1, magic[5]) + "'");
  Reader r(is, path.string());
  Checkpoint c;
  c.kind = r.str();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    c.meta.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n_t = r.u32();
  for (std::uint32_t i = 0; i < n_t; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(Kind::kMalformed, "tensor " + name + " has implausible rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::int64_t dim = r.i64();
      if (dim < 0 || dim > (1 << 26)) throw FormatError(Kind::kMalformed, "tensor " + name + " has a bad dimension");
      shape.push_back(static_cast<int>(dim));
      n *= static_cast<std::size_t>(dim);
    }
    if (n > (std::size_t{1} << 28)) throw FormatError(Kind::kMalformed, "tensor " + name + " is implausibly large");
    Tensor<float> t(shape);
    for (std::size_t e = 0; e < n; ++e) {
      const std::uint32_t u = r.u32();
      std::memcpy(&t.data[e], &u, 4);
    }
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError(Kind::kMalformed, "checkpoint " + path.string() + " has trailing bytes");
  return c;
}

void put_config(Checkpoint& c, const UNetConfig& cfg, CodecMode codec) {
  c.set("unet.latent_channels", std::to_string(cfg.latent_channels));
  c.set("unet.latent_size", std::to_string(cfg.latent_size));
  c.set("unet.widths", std::to_string(cfg.widths[0]) + "," + std::to_string(cfg.widths[1]) + "," +
                           std::to_string(cfg.widths[2]));
  c.set("unet.attn_dim", std::to_string(cfg.attn_dim));
  c.set("unet.heads", std::to_string(cfg.heads));
  c.set("unet.groups", std::to_string(cfg.groups));
  c.set("unet.ff_mult", std::to_string(cfg.ff_mult));
  c.set("unet.time_freq_dim", std::to_string(cfg.time_freq_dim));
  c.set("unet.time_dim", std::to_string(cfg.time_dim));
  c.set("unet.cond_tokens", std::to_string(cfg.cond_tokens));
  c.set("unet.cond_dim", std::to_string(cfg.cond_dim));
  c.set("unet.cond_patch", std::to_string(cfg.cond_patch));
  c.set("unet.cond_hidden", std::to_string(cfg.cond_hidden));
  c.set("unet.map_layer", cfg.map_layer);
  c.set("codec.mode", codec == CodecMode::kIdentity ? "identity" : "learned");
}

UNetConfig get_config(const Checkpoint& c) {
  UNetConfig cfg;
  auto geti = [&](const std::string& k) { return to_int(c.get(k), k); };
  cfg.latent_channels = geti("unet.latent_channels");
  cfg.latent_size = geti("unet.latent_size");
  {
    std::stringstream ss(c.get("unet.widths"));
    std::string part;
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(ss, part, ',')) throw FormatError(Kind::kMalformed, "checkpoint widths malformed");
      cfg.widths[i] = to_int(part, "unet.widths");
    }
  }
  cfg.attn_dim = geti("unet.attn_dim");
  cfg.heads = geti("unet.heads");
  cfg.groups = geti("unet.groups");
  cfg.ff_mult = geti("unet.ff_mult");
  cfg.time_freq_dim = geti("unet.time_freq_dim");
  cfg.time_dim = geti("unet.time_dim");
  cfg.cond_tokens = geti("unet.cond_tokens");
  cfg.cond_dim = geti("unet.cond_dim");
  cfg.cond_patch = geti("unet.cond_patch");
  cfg.cond_hidden = geti("unet.cond_hidden");
  cfg.map_layer = c.get("unet.map_layer");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(Kind::kMalformed, std::string("checkpoint holds an invalid configuration: ") + e.what());
  }
  return cfg;
}

CodecMode get_codec(const Checkpoint& c) {
  const std::string& m = c.get("codec.mode");
  if (m == "identity") return CodecMode::kIdentity;
  if (m == "learned") return CodecMode::kLearned;
  throw FormatError(Kind::kMalformed, "unknown codec mode '" + m + "'");
}

void put_params(Checkpoint& c, const nn::ParamStore<float>& store, const std::string& prefix) {
  for (const auto* p : store.all()) c.tensors.emplace_back(prefix + p->name, p->value);
}

void get_params(const Checkpoint& c, nn::ParamStore<float>& store, const std::string& prefix) {
  for (auto* p : store.all()) {
    const Tensor<float>* t = c.find_tensor(prefix + p->name);
    if (!t) throw FormatError(Kind::kMalformed, "checkpoint lacks tensor " + prefix + p->name);
    if (t->shape != p->value.shape)
      throw FormatError(Kind::kMalformed, "tensor " + prefix + p->name + " has shape " + shape_str(t->shape) +
                                               ", model expects " + shape_str(p->value.shape));
    p->value = *t;
  }
}

void put_optimizer(Checkpoint& c, const AdamW& opt, const std::string& prefix) {
  c.set(prefix + "steps", std::to_string(opt.steps()));
  for (const auto& [name, mo] : opt.moments()) {
    c.tensors.emplace_back(prefix + "m." + name, mo.m);
    c.tensors.emplace_back(prefix + "v." + name, mo.v);
  }
}

void get_optimizer(const Checkpoint& c, AdamW& opt, const std::string& prefix) {
  const long long steps = std::stoll(c.get(prefix + "steps"));
  std::map<std::string, AdamW::Moments> moments;
  const std::string mp = prefix + "m.";
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind(mp, 0) != 0) continue;
    const std::string pname = name.substr(mp.size());
    const Tensor<float>* v = c.find_tensor(prefix + "v." + pname);
    if (!v) throw FormatError(Kind::kMalformed, "optimizer state lacks second moment for " + pname);
    moments[pname] = {t, *v};
  }
  opt.restore(steps, std::move(moments));
}

void save_denoiser(const Denoiser<float>& model, const std::filesystem::path& path) {
  Checkpoint c;
  c.kind = "denoiser";
  put_config(c, model.config());
  put_params(c, model.params(), "");
  write_checkpoint(c, path);
}

std::unique_ptr<Denoiser<float>> denoiser_from_checkpoint(const Checkpoint& c) {
  if (get_codec(c) != CodecMode::kIdentity) throw FormatError(Kind::kMalformed, "checkpoint uses an unsupported codec");
  const std::string prefix = c.kind == "denoiser" ? "" : "model.";
  auto model = std::make_unique<Denoiser<float>>(get_config(c), 0);
  get_params(c, model->params(), prefix);
  return model;
}

std::unique_ptr<Denoiser<float>> load_denoiser(const std::filesystem::path& path) {
  return denoiser_from_checkpoint(read_checkpoint(path));
}

}  // namespace flashclear
