#include "frace/checkpoint.hpp"

#include <fstream>

#include "frace/errors.hpp"

namespace fs = std::filesystem;

namespace frace {

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

}  // namespace

void save_checkpoint(const torch::nn::Module& module, const fs::path& stem,
                     nlohmann::json manifest) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(with_suffix(stem, ".pt").string());

  manifest["format_version"] = kCheckpointFormatVersion;
  std::ofstream out(with_suffix(stem, ".json"));
  if (!out) throw FormatError("cannot write manifest for " + stem.string());
  out << manifest.dump(2) << "\n";
}

nlohmann::json read_manifest(const fs::path& stem) {
  const auto path = with_suffix(stem, ".json");
  std::ifstream in(path);
  if (!in) throw FormatError("missing checkpoint manifest " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("unparseable manifest " + path.string() + ": " + e.what());
  }
  if (manifest.value("format_version", 0) != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format in " + path.string());
  }
  return manifest;
}

void load_weights(torch::nn::Module& module, const fs::path& stem) {
  const auto path = with_suffix(stem, ".pt");
  if (!fs::exists(path)) throw FormatError("missing weight blob " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    module.load(archive);
  } catch (const c10::Error& e) {
    throw FormatError("cannot load " + path.string() + ": " + e.what_without_backtrace());
  }
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
  std::uint64_t hash = 14695981039346656037ull;
  auto mix = [&hash](const torch::Tensor& t) {
    const auto c = t.detach().contiguous().cpu();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = c.numel() * c.element_size();
    for (std::int64_t i = 0; i < n; ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  };
  for (const auto& p : module.parameters()) mix(p);
  for (const auto& b : module.buffers()) mix(b);
  return hash;
}

}  // namespace frace
