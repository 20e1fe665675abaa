#include "metapu/checkpoint.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "metapu/errors.hpp"

namespace metapu {

namespace {

constexpr std::array<char, 8> kMagic{'M', 'E', 'T', 'A', 'P', 'U', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>(bits & 0xFFu));
    bits >>= 8;
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(U) > in.size()) throw SchemaError("checkpoint: truncated file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace

void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(fmt::format("write to {} failed", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointManifest& manifest, const MetaParams& params) {
  nlohmann::json m;
  m["format_version"] = kCheckpointVersion;
  m["dims"] = {{"D", manifest.dims.input_dim},
               {"K", manifest.dims.repr_dim},
               {"M", manifest.dims.embed_dim},
               {"hidden", manifest.dims.hidden},
               {"use_task_repr", manifest.dims.use_task_repr}};
  m["tau"] = manifest.tau;
  m["lambda_init"] = manifest.lambda_init;
  m["seed"] = manifest.seed;
  m["iteration"] = manifest.iteration;
  m["validation_accuracy"] = manifest.validation_accuracy;
  nlohmann::json arrays = nlohmann::json::array();
  std::string payload;
  params.for_each_array([&](const std::string& name, const Matrix& a) {
    arrays.push_back({{"name", name}, {"rows", a.rows()}, {"cols", a.cols()}});
    for (ad::Index i = 0; i < a.size(); ++i) put_le(payload, a.data()[i]);
  });
  m["arrays"] = std::move(arrays);

  const std::string text = m.dump();
  std::string bytes(kMagic.begin(), kMagic.end());
  put_le(bytes, kCheckpointVersion);
  put_le(bytes, static_cast<std::uint32_t>(text.size()));
  bytes += text;
  bytes += payload;
  write_file_atomically(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open checkpoint {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();

  if (bytes.size() < 16 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw SchemaError(fmt::format("{}: not a checkpoint file", path.string()));
  }
  std::size_t pos = 8;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw SchemaError(fmt::format("checkpoint format version {} is not supported (expected {})", version,
                                  kCheckpointVersion));
  }
  const auto length = get_le<std::uint32_t>(bytes, pos);
  if (pos + length > bytes.size()) throw SchemaError("checkpoint: truncated manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.substr(pos, length));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("checkpoint manifest: {}", e.what()));
  }
  pos += length;

  Checkpoint ck;
  try {
    auto& md = ck.manifest;
    md.dims.input_dim = m.at("dims").at("D").get<int>();
    md.dims.repr_dim = m.at("dims").at("K").get<int>();
    md.dims.embed_dim = m.at("dims").at("M").get<int>();
    md.dims.hidden = m.at("dims").at("hidden").get<int>();
    md.dims.use_task_repr = m.at("dims").at("use_task_repr").get<bool>();
    md.tau = m.at("tau").get<double>();
    md.lambda_init = m.at("lambda_init").get<double>();
    md.seed = m.at("seed").get<std::uint64_t>();
    md.iteration = m.at("iteration").get<long>();
    md.validation_accuracy = m.value("validation_accuracy", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(fmt::format("checkpoint manifest: {}", e.what()));
  }

  ck.params = MetaParams::init(ck.manifest.dims, ck.manifest.lambda_init, 0);
  const auto targets = ck.params.mutable_arrays();
  std::vector<std::string> names;
  ck.params.for_each_array([&names](const std::string& n, const Matrix&) { names.push_back(n); });
  const auto& arrays = m.at("arrays");
  if (arrays.size() != targets.size()) {
    throw SchemaError(fmt::format("checkpoint: {} arrays stored, model expects {}", arrays.size(), targets.size()));
  }
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& entry = arrays[k];
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<ad::Index>();
    const auto cols = entry.at("cols").get<ad::Index>();
    Matrix& dst = *targets[k];
    if (name != names[k] || rows != dst.rows() || cols != dst.cols()) {
      throw SchemaError(fmt::format("checkpoint: array {} is {} [{}x{}], expected {} [{}x{}]", k, name, rows, cols,
                                    names[k], dst.rows(), dst.cols()));
    }
    for (ad::Index i = 0; i < dst.size(); ++i) dst.data()[i] = get_le<double>(bytes, pos);
  }
  if (pos != bytes.size()) throw SchemaError("checkpoint: trailing bytes after payload");
  return ck;
}

}  // namespace metapu
