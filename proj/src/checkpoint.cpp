#include "gradmask/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"

namespace gradmask {

namespace {

constexpr char kMagic[4] = {'G', 'M', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.append(raw, sizeof(T));
}

void put_string(std::string& out, std::string_view s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

struct Cursor {
  std::string_view bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (bytes.size() - pos < sizeof(T)) {
      throw ValidationError("checkpoint: truncated at byte " +
                            std::to_string(pos));
    }
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (bytes.size() - pos < n) {
      throw ValidationError("checkpoint: truncated string at byte " +
                            std::to_string(pos));
    }
    std::string s(bytes.substr(pos, n));
    pos += n;
    return s;
  }
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put(out, kVersion);
  nlohmann::json cfg = ckpt.config;
  put_string(out, cfg.dump());
  put(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& t = ckpt.params.tensor(i);
    put_string(out, ckpt.params.name(i));
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put(out, v);
  }
  put(out, ckpt.meta.epoch);
  put(out, ckpt.meta.seed);
  put(out, ckpt.meta.lambda);
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Cursor c{bytes};
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("checkpoint: bad magic, expected GMCK");
  }
  c.pos = 4;
  const auto version = c.get<std::uint16_t>();
  if (version != kVersion) {
    throw ValidationError("checkpoint: unsupported version " +
                          std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    ckpt.config = nlohmann::json::parse(c.get_string()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad config echo: ") +
                          e.what());
  }
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = c.get_string();
    const auto rank = c.get<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = c.get<std::uint32_t>();
    std::vector<double> data(ad::numel(shape));
    for (auto& v : data) v = c.get<double>();
    ckpt.params.add(std::move(name), ad::Tensor::leaf(shape, std::move(data)));
  }
  ckpt.meta.epoch = c.get<std::uint64_t>();
  ckpt.meta.seed = c.get<std::uint64_t>();
  ckpt.meta.lambda = c.get<double>();
  if (c.pos != bytes.size()) {
    throw ValidationError("checkpoint: trailing bytes");
  }
  // Shapes must match what the config would build.
  const ModelParams expected = init_params(ckpt.config);
  if (expected.size() != ckpt.params.size()) {
    throw ValidationError("checkpoint: tensor count does not match config");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected.name(i) != ckpt.params.name(i) ||
        expected.tensor(i).shape() != ckpt.params.tensor(i).shape()) {
      throw ValidationError("checkpoint: tensor '" + ckpt.params.name(i) +
                            "' does not match config");
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  // Readers never see a partial checkpoint.
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace gradmask
