#include "radt/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace radt::nn {

namespace {

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string read_bytes(std::ifstream& f, std::size_t n) {
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const ParamStore<float>& ps, const std::string& config_json,
                     const std::string& rng_state, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(kCheckpointMagic, 12);
  write_pod<u64>(f, config_json.size());
  f.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  write_pod<u64>(f, rng_state.size());
  f.write(rng_state.data(), static_cast<std::streamsize>(rng_state.size()));
  write_pod<u32>(f, static_cast<u32>(ps.list().size()));
  for (const auto& t : ps.list()) {
    write_pod<u32>(f, static_cast<u32>(t->name.size()));
    f.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    write_pod<u32>(f, static_cast<u32>(t->value.rows));
    write_pod<u32>(f, static_cast<u32>(t->value.cols));
    write_pod<std::uint8_t>(f, 0);  // f32
    f.write(reinterpret_cast<const char*>(t->value.ptr()),
            static_cast<std::streamsize>(t->value.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[12];
  f.read(magic, 12);
  if (!f || std::memcmp(magic, kCheckpointMagic, 12) != 0)
    throw std::runtime_error("checkpoint: format mismatch (expected radt-ckpt-1)");
  Checkpoint ck;
  ck.config_json = read_bytes(f, read_pod<u64>(f));
  ck.rng_state = read_bytes(f, read_pod<u64>(f));
  u32 n = read_pod<u32>(f);
  ck.tensors.reserve(n);
  for (u32 i = 0; i < n; ++i) {
    std::string name = read_bytes(f, read_pod<u32>(f));
    u32 rows = read_pod<u32>(f);
    u32 cols = read_pod<u32>(f);
    auto dtype = read_pod<std::uint8_t>(f);
    if (dtype != 0) throw std::runtime_error("checkpoint: unsupported dtype in " + name);
    Matrix<float> m(static_cast<int>(rows), static_cast<int>(cols));
    f.read(reinterpret_cast<char*>(m.ptr()),
           static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!f) throw std::runtime_error("checkpoint: truncated tensor " + name);
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ck;
}

void Checkpoint::load_into(ParamStore<float>& ps) const {
  if (tensors.size() != ps.list().size())
    throw std::runtime_error("checkpoint: tensor count mismatch");
  for (const auto& [name, m] : tensors) {
    auto& t = ps.at(name);
    if (t.value.rows != m.rows || t.value.cols != m.cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    t.value.data = m.data;
  }
}

}  // namespace radt::nn
