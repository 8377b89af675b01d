#include "milsurv/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "milsurv/error.hpp"

namespace milsurv {
namespace fs = std::filesystem;

namespace {

constexpr std::uint16_t kVersion = 1;
constexpr char kMagic[4] = {'M', 'I', 'L', 'C'};

void put(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Cursor {
  std::span<const std::uint8_t> in;
  std::size_t pos = 0;

  std::uint64_t get(int bytes) {
    require(pos + static_cast<std::size_t>(bytes) <= in.size(), ErrorKind::corrupt_file, "checkpoint: truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    require(pos + n <= in.size(), ErrorKind::corrupt_file, "checkpoint: truncated");
    std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return s;
  }
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

template <class T>
void save_checkpoint(const MilHead<T>& head, const CheckpointMeta& meta, const fs::path& path) {
  nlohmann::json header{{"config", head.config()}, {"seed", meta.seed}, {"epoch", meta.epoch}, {"extra", meta.extra}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put(out, kVersion, 2);
  put(out, text.size(), 4);
  out.insert(out.end(), text.begin(), text.end());
  put(out, head.parameters().size(), 4);
  for (const auto& p : head.parameters()) {
    put(out, p.name.size(), 2);
    out.insert(out.end(), p.name.begin(), p.name.end());
    const auto& shape = p.value.shape();
    put(out, shape.size(), 1);
    for (auto extent : shape) put(out, extent, 4);
    for (T v : p.value.values()) put(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  put(out, crc(out), 4);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file.good()) fail(ErrorKind::io, "cannot write " + tmp.string());
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!file.good()) fail(ErrorKind::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file.good()) fail(ErrorKind::io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
  if (!(bytes.size() >= 14 && std::memcmp(bytes.data(), kMagic, 4) == 0)) fail(ErrorKind::corrupt_file, path.string() + ": not a checkpoint");
  const std::span<const std::uint8_t> body(bytes.data(), bytes.size() - 4);
  Cursor tail{std::span<const std::uint8_t>(bytes).subspan(bytes.size() - 4)};
  if (!(tail.get(4) == crc(body))) fail(ErrorKind::corrupt_file, path.string() + ": checksum mismatch");

  Cursor in{body, 4};
  const auto version = in.get(2);
  if (!(version == kVersion)) fail(ErrorKind::corrupt_file, path.string() + ": unsupported version " + std::to_string(version));
  LoadedCheckpoint loaded;
  try {
    const auto header = nlohmann::json::parse(in.str(in.get(4)));
    loaded.config = header.at("config").get<HeadConfig>();
    loaded.meta.seed = header.at("seed").get<std::uint64_t>();
    loaded.meta.epoch = header.at("epoch").get<int>();
    loaded.meta.extra = header.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::corrupt_file, path.string() + ": bad header: " + e.what());
  }

  std::map<std::string, std::pair<Shape, std::vector<float>>> blobs;
  const auto count = in.get(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.str(in.get(2));
    Shape shape(in.get(1));
    for (auto& extent : shape) extent = in.get(4);
    std::vector<float> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.get(4)));
    blobs.emplace(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }
  if (!(in.pos == body.size())) fail(ErrorKind::corrupt_file, path.string() + ": trailing bytes");

  Rng rng(loaded.meta.seed);
  loaded.head = build_head<float>(loaded.config, rng);
  if (!(blobs.size() == loaded.head->parameters().size())) fail(ErrorKind::corrupt_file, path.string() + ": parameter set does not match the head config");
  for (auto& p : loaded.head->parameters()) {
    auto found = blobs.find(p.name);
    if (!(found != blobs.end())) fail(ErrorKind::corrupt_file, path.string() + ": missing parameter " + p.name);
    if (!(found->second.first == p.value.shape())) fail(ErrorKind::corrupt_file, path.string() + ": parameter " + p.name + " has shape " + shape_string(found->second.first));
    std::copy(found->second.second.begin(), found->second.second.end(), p.value.values().begin());
  }
  return loaded;
}

template void save_checkpoint(const MilHead<float>&, const CheckpointMeta&, const fs::path&);
template void save_checkpoint(const MilHead<double>&, const CheckpointMeta&, const fs::path&);

}  // namespace milsurv
