#include "hfrl/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hfrl {

namespace {

constexpr std::array<char, 8> kMagic{'H', 'F', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kFloat64 = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string get_string(std::istream& in, std::size_t n) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointArchive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp);
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kCheckpointVersion);
    nlohmann::json manifest = archive.manifest;
    manifest["format_version"] = kCheckpointVersion;
    const std::string text = manifest.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& [key, m] : archive.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
      out.write(key.data(), static_cast<std::streamsize>(key.size()));
      put<std::uint8_t>(out, kFloat64);
      put<std::uint32_t>(out, 2);
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointArchive load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointArchive archive;
  const auto mlen = get<std::uint64_t>(in);
  archive.manifest = nlohmann::json::parse(get_string(in, mlen));
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto klen = get<std::uint32_t>(in);
    std::string key = get_string(in, klen);
    if (get<std::uint8_t>(in) != kFloat64) throw std::runtime_error("checkpoint: unsupported dtype for " + key);
    const auto rank = get<std::uint32_t>(in);
    if (rank > 2) throw std::runtime_error("checkpoint: rank > 2 for " + key);
    std::array<std::uint64_t, 2> dims{1, 1};
    for (std::uint32_t d = 0; d < rank; ++d) dims[rank == 1 ? 1 : d] = get<std::uint64_t>(in);
    ad::Matrix m(static_cast<ad::Index>(dims[0]), static_cast<ad::Index>(dims[1]));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor " + key);
    archive.tensors.emplace(std::move(key), std::move(m));
  }
  return archive;
}

}  // namespace hfrl
