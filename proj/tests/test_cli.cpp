// Drives the installed pfcm binary end to end. The binary path arrives via
// the PFCM_BIN environment variable (set by CTest).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfcm/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string binary() {
  const char* env = std::getenv("PFCM_BIN");
  REQUIRE_MESSAGE(env != nullptr, "PFCM_BIN must point at the pfcm binary");
  return env;
}

int run(const std::string& args) {
  const std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cli: exit codes for bad usage and missing files") {
  CHECK(run("no-such-command") == 2);
  CHECK(run("denoise --nope") == 2);
  CHECK(run("pretrain --data /nonexistent --out /tmp/pfcm_cli_x --iters 1") == 5);
}

TEST_CASE("cli: full small pipeline with exact sampler semantics") {
  TempDir td("pfcm_cli_pipeline");
  const std::string data = (td.path / "data").string();
  const std::string run1 = (td.path / "run1").string();
  const std::string run2 = (td.path / "run2").string();

  REQUIRE(run("phantom-gen --out " + data +
              " --count 4 --n 16 --seed 11 --base-std 0.06") == 0);

  // iters 0: checkpoint equals the initialization, manifest still written
  REQUIRE(run("pretrain --data " + data + " --out " + run1 +
              " --iters 0 --width 4 --levels 2 --emb-dim 8 --patch 8 "
              "--seed 3") == 0);
  REQUIRE(run("pretrain --data " + data + " --out " + run2 +
              " --iters 0 --width 4 --levels 2 --emb-dim 8 --patch 8 "
              "--seed 3") == 0);
  CHECK(pfcm::fnv1a64_file(td.path / "run1" / "pfgmpp.ckpt") ==
        pfcm::fnv1a64_file(td.path / "run2" / "pfgmpp.ckpt"));
  CHECK(fs::exists(td.path / "run1" / "manifests.jsonl"));

  // short real training, then distill
  const std::string run3 = (td.path / "run3").string();
  REQUIRE(run("pretrain --data " + data + " --out " + run3 +
              " --iters 20 --width 4 --levels 2 --emb-dim 8 --patch 8 "
              "--seed 3") == 0);
  const std::string run4 = (td.path / "run4").string();
  REQUIRE(run("distill --teacher " + run3 + "/pfgmpp.ckpt --data " + data +
              " --out " + run4 + " --iters 10 --patch 8 --seed 4") == 0);

  // metadata mismatch: task sampling from a pfgmpp checkpoint is refused
  CHECK(run("denoise --ckpt " + run3 + "/pfgmpp.ckpt --input " + data +
            "/noisy_0000 --out " + (td.path / "bad").string() +
            " --sampler task") == 3);

  // w = 0: output payload is byte-identical to the input payload
  const std::string den = (td.path / "den").string();
  REQUIRE(run("denoise --ckpt " + run4 + "/pfcm.ckpt --input " + data +
              "/noisy_0000 --out " + den + " --sampler task --w 0 "
              "--sigma-hat 0.5") == 0);
  CHECK(slurp(td.path / "den" / "denoised.bin") ==
        slurp(td.path / "data" / "noisy_0000.bin"));

  // report carries the NFE of 1
  {
    std::ifstream in(td.path / "den" / "report.json");
    json j;
    in >> j;
    CHECK(j.at("nfe").get<int>() == 1);
    CHECK(j.at("sampler").get<std::string>() == "task");
  }

  // heun from the pfgmpp checkpoint reports 79 at 40 scales
  const std::string heun = (td.path / "heun").string();
  REQUIRE(run("denoise --ckpt " + run3 + "/pfgmpp.ckpt --input " + data +
              "/noisy_0000 --out " + heun + " --sampler heun --seed 5") == 0);
  {
    std::ifstream in(td.path / "heun" / "report.json");
    json j;
    in >> j;
    CHECK(j.at("nfe").get<int>() == 79);
  }

  // gridsearch + evaluate + ablate run end to end
  const std::string gs = (td.path / "gs").string();
  REQUIRE(run("gridsearch --ckpt " + run4 + "/pfcm.ckpt --data " + data +
              " --out " + gs + " --i-grid 38:40 --w-grid 0.5,1.0") == 0);
  CHECK(fs::exists(td.path / "gs" / "grid.csv"));
  CHECK(fs::exists(td.path / "gs" / "best.json"));

  const std::string ev = (td.path / "ev").string();
  REQUIRE(run("evaluate --ckpt " + run4 + "/pfcm.ckpt --data " + data +
              " --out " + ev + " --sampler task --i 39 --w 0.7") == 0);
  CHECK(fs::exists(td.path / "ev" / "metrics.json"));

  const std::string abd = (td.path / "ab").string();
  REQUIRE(run("ablate --ckpt " + run4 + "/pfcm.ckpt --data " + data +
              " --out " + abd + " --i 39 --w 0.7 --seed 6") == 0);
  CHECK(fs::exists(td.path / "ab" / "ablation.csv"));

  // manifests are append-only: one line per invocation in the shared dir
  std::ifstream mf(td.path / "data" / "manifests.jsonl");
  int lines = 0;
  std::string line;
  while (std::getline(mf, line)) ++lines;
  CHECK(lines == 1);
}

TEST_CASE("cli: PFCM_SEED environment override") {
  TempDir td("pfcm_cli_seed");
  const std::string a = (td.path / "a").string();
  const std::string b = (td.path / "b").string();
  const std::string c = (td.path / "c").string();

  REQUIRE(std::system((std::string("PFCM_SEED=123 ") + binary() +
                       " phantom-gen --out " + a + " --count 2 --n 16 "
                       ">/dev/null 2>&1")
                          .c_str()) == 0);
  REQUIRE(run("phantom-gen --out " + b + " --count 2 --n 16 --seed 123") == 0);
  REQUIRE(run("phantom-gen --out " + c + " --count 2 --n 16 --seed 999") == 0);

  CHECK(pfcm::fnv1a64_file(td.path / "a" / "clean_0000.bin") ==
        pfcm::fnv1a64_file(td.path / "b" / "clean_0000.bin"));
  CHECK(pfcm::fnv1a64_file(td.path / "a" / "clean_0000.bin") !=
        pfcm::fnv1a64_file(td.path / "c" / "clean_0000.bin"));

  // flag beats the environment
  REQUIRE(std::system((std::string("PFCM_SEED=123 ") + binary() +
                       " phantom-gen --out " + (td.path / "d").string() +
                       " --count 2 --n 16 --seed 999 >/dev/null 2>&1")
                          .c_str()) == 0);
  CHECK(pfcm::fnv1a64_file(td.path / "d" / "clean_0000.bin") ==
        pfcm::fnv1a64_file(td.path / "c" / "clean_0000.bin"));
}

TEST_CASE("cli: reproducibility of artifacts under a fixed seed") {
  TempDir td("pfcm_cli_repro");
  for (const char* which : {"x", "y"}) {
    const std::string dir = (td.path / which).string();
    REQUIRE(run("phantom-gen --out " + dir + " --count 3 --n 16 --seed 77") == 0);
    REQUIRE(run("pretrain --data " + dir + " --out " + dir +
                "/train --iters 15 --width 4 --levels 2 --emb-dim 8 "
                "--patch 8 --seed 21") == 0);
  }
  CHECK(pfcm::fnv1a64_file(td.path / "x" / "train" / "pfgmpp.ckpt") ==
        pfcm::fnv1a64_file(td.path / "y" / "train" / "pfgmpp.ckpt"));
  CHECK(pfcm::fnv1a64_file(td.path / "x" / "clean_0002.bin") ==
        pfcm::fnv1a64_file(td.path / "y" / "clean_0002.bin"));
}
