#include "pfcm/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

namespace pfcm {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "image payloads are little-endian float32");

void save_image(const std::filesystem::path& stem, const ImageTensor& img,
                const ImageSidecar& meta) {
  img.require_finite("save_image");
  std::filesystem::path bin = stem;
  bin += ".bin";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + bin.string());
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!out) throw Error(ErrorKind::Io, "short write to " + bin.string());

  json side{
      {"n", img.n},
      {"role", meta.role},
      {"seed", meta.seed},
      {"dose_factor", meta.dose_factor},
      {"transform", meta.transform},
  };
  std::filesystem::path js = stem;
  js += ".json";
  std::ofstream jout(js);
  if (!jout) throw Error(ErrorKind::Io, "cannot write " + js.string());
  jout << side.dump(2) << "\n";
}

ImageTensor load_image(const std::filesystem::path& stem, ImageSidecar* meta_out) {
  std::filesystem::path js = stem;
  js += ".json";
  std::ifstream jin(js);
  if (!jin) throw Error(ErrorKind::Io, "cannot open sidecar " + js.string());
  json side;
  try {
    jin >> side;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, "malformed sidecar " + js.string() + ": " + e.what());
  }
  ImageSidecar meta;
  meta.n = side.at("n").get<int>();
  meta.role = side.value("role", "");
  meta.seed = side.value("seed", std::uint64_t{0});
  meta.dose_factor = side.value("dose_factor", 1.0);
  meta.transform = side.value("transform", 0);

  ImageTensor img(meta.n);
  std::filesystem::path bin = stem;
  bin += ".bin";
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + bin.string());
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size() * sizeof(float))) {
    throw Error(ErrorKind::Io, "truncated image payload " + bin.string());
  }
  img.require_finite("load_image");
  if (meta_out) *meta_out = meta;
  return img;
}

void save_dataset_manifest(const std::filesystem::path& dir,
                           const std::vector<DatasetEntry>& entries) {
  json m;
  m["pairs"] = json::array();
  for (const auto& e : entries) {
    m["pairs"].push_back({{"clean", e.clean_stem + ".json"},
                          {"noisy", e.noisy_stem + ".json"}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) {
    throw Error(ErrorKind::Io, "cannot write manifest in " + dir.string());
  }
  out << m.dump(2) << "\n";
}

std::vector<DatasetEntry> load_dataset_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw Error(ErrorKind::Io, "no manifest.json in " + dir.string());
  }
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed manifest: ") + e.what());
  }
  std::vector<DatasetEntry> entries;
  for (const auto& p : m.at("pairs")) {
    auto strip = [](std::string s) {
      if (s.size() > 5 && s.ends_with(".json")) s.resize(s.size() - 5);
      return s;
    };
    entries.push_back({strip(p.at("clean").get<std::string>()),
                       strip(p.at("noisy").get<std::string>())});
  }
  return entries;
}

std::vector<PairedSample> load_dataset(const std::filesystem::path& dir) {
  std::vector<PairedSample> out;
  for (const auto& e : load_dataset_manifest(dir)) {
    PairedSample s;
    ImageSidecar cm, nm;
    s.clean = load_image(dir / e.clean_stem, &cm);
    s.noisy = load_image(dir / e.noisy_stem, &nm);
    s.meta.seed = nm.seed;
    s.meta.dose_factor = nm.dose_factor;
    s.meta.transform = nm.transform;
    s.validate();
    out.push_back(std::move(s));
  }
  if (out.empty()) {
    throw Error(ErrorKind::Io, "dataset in " + dir.string() + " is empty");
  }
  return out;
}

std::uint64_t fnv1a64_bytes(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + file.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const auto got = static_cast<std::size_t>(in.gcount());
    for (std::size_t i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace pfcm
