#include "hitl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "hitl/error.hpp"

namespace hitl {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

constexpr std::array<char, 8> kMagic{'H', 'I', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void doubles(std::span<const double> xs) {
    pod<std::uint64_t>(xs.size());
    out_.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw StorageError("truncated checkpoint: " + path_);
    return v;
  }
  std::vector<double> doubles(std::size_t expected) {
    const auto n = pod<std::uint64_t>();
    if (n != expected) throw ConfigError("checkpoint tensor size mismatch in " + path_);
    std::vector<double> xs(n);
    in_.read(reinterpret_cast<char*>(xs.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in_) throw StorageError("truncated checkpoint: " + path_);
    return xs;
  }

 private:
  std::ifstream& in_;
  std::string path_;
};

void write_net(Writer& w, const nn::DuelingNet& net) {
  const auto& sizes = net.layer_sizes();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(sizes.size()));
  for (int s : sizes) w.pod<std::int32_t>(s);
  w.doubles(net.params());
}

nn::DuelingNet read_net(Reader& r) {
  const auto n = r.pod<std::uint32_t>();
  if (n < 3 || n > 16) throw ConfigError("checkpoint: implausible layer count");
  std::vector<int> sizes(n);
  for (auto& s : sizes) s = r.pod<std::int32_t>();
  std::vector<int> hidden(sizes.begin() + 1, sizes.end() - 1);
  nn::DuelingNet net(0, sizes.front(), hidden, sizes.back() - 1);
  const auto params = r.doubles(net.num_params());
  std::copy(params.begin(), params.end(), net.params().begin());
  return net;
}

void write_adam(Writer& w, const nn::AdamState& st) {
  w.pod(st.cfg.lr);
  w.pod(st.cfg.beta1);
  w.pod(st.cfg.beta2);
  w.pod(st.cfg.eps);
  w.pod<std::uint8_t>(st.cfg.nesterov ? 1 : 0);
  w.pod(st.t);
  w.doubles(st.m);
  w.doubles(st.v);
}

nn::AdamState read_adam(Reader& r, std::size_t n) {
  nn::AdamConfig cfg;
  cfg.lr = r.pod<double>();
  cfg.beta1 = r.pod<double>();
  cfg.beta2 = r.pod<double>();
  cfg.eps = r.pod<double>();
  cfg.nesterov = r.pod<std::uint8_t>() != 0;
  nn::AdamState st(n, cfg);
  st.t = r.pod<std::uint64_t>();
  st.m = r.doubles(n);
  st.v = r.doubles(n);
  return st;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::DuelingNetPair& nets,
                     const TrainingCounters& counters) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot write checkpoint: " + path.string());
  out.write(kMagic.data(), kMagic.size());
  Writer w(out);
  w.pod(kVersion);
  write_net(w, nets.q1);
  write_net(w, nets.q2);
  write_net(w, nets.target1);
  write_net(w, nets.target2);
  write_adam(w, nets.adam1);
  write_adam(w, nets.adam2);
  w.pod(counters.global_step);
  w.pod(counters.episodes);
  w.pod(counters.train_steps);
  if (!out) throw StorageError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ConfigError("not a checkpoint file: " + path.string());
  Reader r(in, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.nets.q1 = read_net(r);
  ck.nets.q2 = read_net(r);
  ck.nets.target1 = read_net(r);
  ck.nets.target2 = read_net(r);
  ck.nets.adam1 = read_adam(r, ck.nets.q1.num_params());
  ck.nets.adam2 = read_adam(r, ck.nets.q2.num_params());
  ck.counters.global_step = r.pod<std::uint64_t>();
  ck.counters.episodes = r.pod<std::uint64_t>();
  ck.counters.train_steps = r.pod<std::uint64_t>();
  return ck;
}

}  // namespace hitl
