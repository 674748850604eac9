#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pfcm/types.hpp"

namespace pfcm {

// Image-on-disk sidecar contents. "role" is clean | noisy | denoised | diff.
struct ImageSidecar {
  int n = 0;
  std::string role;
  std::uint64_t seed = 0;
  double dose_factor = 1.0;
  int transform = 0;
};

// One image pair on disk: <stem>.bin holds n*n little-endian float32 values,
// <stem>.json the sidecar.
void save_image(const std::filesystem::path& stem, const ImageTensor& img,
                const ImageSidecar& meta);
ImageTensor load_image(const std::filesystem::path& stem,
                       ImageSidecar* meta_out = nullptr);

// Dataset directory layout written by phantom-gen: pairs of images plus
// manifest.json listing every sidecar.
struct DatasetEntry {
  std::string clean_stem;
  std::string noisy_stem;
};

void save_dataset_manifest(const std::filesystem::path& dir,
                           const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> load_dataset_manifest(const std::filesystem::path& dir);

std::vector<PairedSample> load_dataset(const std::filesystem::path& dir);

// FNV-1a over a file's bytes; used for checkpoint/artifact hashes in run
// manifests.
std::uint64_t fnv1a64_file(const std::filesystem::path& file);
std::uint64_t fnv1a64_bytes(const void* data, std::size_t len);
std::string hex64(std::uint64_t v);

}  // namespace pfcm
