#include "wsrtl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace wsrtl {

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

namespace {

constexpr char kMagic[4] = {'W', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ofstream& os) : os_(os) {}
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const TensorF& t) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) pod<std::int32_t>(d);
    os_.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }

 private:
  std::ofstream& os_;
};

class Reader {
 public:
  Reader(std::ifstream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) fail("truncated");
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 32)) fail("corrupt string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) fail("truncated");
    return s;
  }
  TensorF tensor() {
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) fail("corrupt tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(pod<std::int32_t>());
    TensorF t(shape);
    is_.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is_) fail("truncated");
    return t;
  }
  [[noreturn]] void fail(const std::string& m) const { throw std::runtime_error("checkpoint " + path_ + ": " + m); }

 private:
  std::ifstream& is_;
  std::string path_;
};

void copy_into(TensorF& dst, const TensorF& src, const std::string& name, const Reader& r) {
  if (dst.shape() != src.shape())
    r.fail(name + " has shape " + shape_string(src.shape()) + ", model expects " + shape_string(dst.shape()));
  dst.array() = src.array();
}

ModelConfig read_header(Reader& r) {
  char magic[4];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("not a checkpoint");
  if (r.pod<std::uint32_t>() != kVersion) r.fail("unsupported version");
  const auto hash = r.pod<std::uint64_t>();
  ModelConfig config = ModelConfig::from_json(r.str());
  if (config.hash() != hash) r.fail("config hash does not match its config");
  return config;
}

}  // namespace

void write_checkpoint(const std::string& path, const WsrtlModel<float>& model, const Adam<float>* adam,
                      const CheckpointState& state) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp);
    Writer w(os);
    os.write(kMagic, 4);
    w.pod(kVersion);
    w.pod(model.config().hash());
    w.str(model.config().to_json());
    const auto& store = model.store();
    w.pod<std::uint64_t>(store.entries().size());
    for (const auto& e : store.entries()) {
      w.str(e.name);
      w.tensor(e.var.value());
    }
    w.pod<std::uint64_t>(store.buffers().size());
    for (const auto& [name, t] : store.buffers()) {
      w.str(name);
      w.tensor(t);
    }
    w.pod<std::uint64_t>(adam ? adam->slots().size() : 0);
    if (adam)
      for (const auto& [name, slot] : adam->slots()) {
        w.str(name);
        w.pod<std::int64_t>(slot.steps);
        w.tensor(slot.m);
        w.tensor(slot.v);
      }
    w.pod<std::int64_t>(state.iteration);
    w.pod<std::int32_t>(state.all_masked);
    w.str(state.rng_state);
    w.str(state.train_config);
    w.pod<std::uint64_t>(state.samplers.size());
    for (const auto& s : state.samplers) {
      w.pod<std::uint8_t>(s.present ? 1 : 0);
      w.str(s.rng_state);
      w.pod<std::uint64_t>(s.cursor);
      w.pod<std::uint64_t>(s.order.size());
      for (int i : s.order) w.pod<std::int32_t>(i);
      w.pod<std::uint64_t>(s.epoch);
    }
    os.flush();
    if (!os) throw std::runtime_error("checkpoint write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot move checkpoint into place: " + ec.message());
}

void read_checkpoint(const std::string& path, WsrtlModel<float>& model, Adam<float>* adam, CheckpointState* state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r(is, path);
  const ModelConfig stored = read_header(r);
  if (stored.hash() != model.config().hash())
    r.fail("written for config " + stored.to_json() + ", model has " + model.config().to_json());
  auto& store = model.store();
  const auto n_params = r.pod<std::uint64_t>();
  if (n_params != store.entries().size()) r.fail("parameter count differs");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::string name = r.str();
    auto* v = store.find(name);
    if (!v) r.fail("unknown parameter " + name);
    copy_into(v->mutable_value(), r.tensor(), name, r);
  }
  const auto n_buffers = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_buffers; ++i) {
    const std::string name = r.str();
    auto* t = store.find_buffer(name);
    if (!t) r.fail("unknown buffer " + name);
    copy_into(*t, r.tensor(), name, r);
  }
  const auto n_slots = r.pod<std::uint64_t>();
  if (adam) adam->slots().clear();
  for (std::uint64_t i = 0; i < n_slots; ++i) {
    const std::string name = r.str();
    Adam<float>::Slot slot;
    slot.steps = r.pod<std::int64_t>();
    slot.m = r.tensor();
    slot.v = r.tensor();
    if (adam) adam->slots()[name] = std::move(slot);
  }
  CheckpointState s;
  s.iteration = r.pod<std::int64_t>();
  s.all_masked = r.pod<std::int32_t>();
  s.rng_state = r.str();
  s.train_config = r.str();
  const auto n_samplers = r.pod<std::uint64_t>();
  if (n_samplers > 16) r.fail("corrupt sampler count");
  for (std::uint64_t k = 0; k < n_samplers; ++k) {
    SamplerState st;
    st.present = r.pod<std::uint8_t>() != 0;
    st.rng_state = r.str();
    st.cursor = r.pod<std::uint64_t>();
    const auto n = r.pod<std::uint64_t>();
    if (n > (1ull << 31)) r.fail("corrupt sampler order");
    for (std::uint64_t i = 0; i < n; ++i) st.order.push_back(r.pod<std::int32_t>());
    st.epoch = r.pod<std::uint64_t>();
    s.samplers.push_back(std::move(st));
  }
  if (state) *state = std::move(s);
}

ModelConfig checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r(is, path);
  return read_header(r);
}

}  // namespace wsrtl
