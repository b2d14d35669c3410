#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sys/wait.h>

#include "dlf/volcore.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "dlf_cli_test";

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const std::string& args) {
  const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = "cd '" + kRoot.string() + "' && '" + std::string(DLF_CLI_PATH) + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Small enough for a few seconds per command.
const char* kConfig =
    "seed = 11\n"
    "phantom.dims = 16\n"
    "phantom.labels = 3\n"
    "phantom.subjects = 5\n"
    "train.patch = 8\n"
    "train.fg_patches = 3\n"
    "train.bg_patches = 1\n"
    "train.atlases = 2\n"
    "train.epochs = 2\n"
    "train.base_features = 2\n"
    "train.stride = 8\n"
    "fusion.search_radius = 1\n";

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    write(kRoot / "c.txt", kConfig);
  }
  ~Fixture() { fs::remove_all(kRoot); }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  Fixture f;
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("fuse --method vote --data d --target s000 --out o.dlfv").code == 2);
  CHECK(run_cli("synth").code == 2);
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("--version").out.find("dlf ") == 0);

  write(kRoot / "bad.txt", "phantom.colour = red\n");
  const auto r = run_cli("synth --config bad.txt --out d");
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.txt:1: unknown config key: phantom.colour") != std::string::npos);
  write(kRoot / "bad2.txt", "phantom.labels = 1\n");
  CHECK(run_cli("synth --config bad2.txt --out d").code == 2);
  CHECK(run_cli("ttest --x 1,2,3 --y 1,2").code == 2);
  CHECK(run_cli("ttest --x 1,2,x --y 1,2,3").code == 2);
}

TEST_CASE("runtime errors exit with 1") {
  Fixture f;
  fs::create_directories(kRoot / "empty");
  const auto r = run_cli("fuse --method mv --data empty --target s000 --out o.dlfv");
  CHECK(r.code == 1);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("synthesize, fuse, evaluate") {
  Fixture f;
  auto s = run_cli("synth --config c.txt --out data");
  REQUIRE(s.code == 0);
  CHECK(s.out == "subjects=5\n");
  CHECK(fs::exists(kRoot / "data" / "manifest.txt"));
  CHECK(fs::exists(kRoot / "data" / "subjects" / "s004" / "labels.dlfv"));
  const auto manifest = slurp(kRoot / "data" / "run_manifest.txt");
  CHECK(manifest.find("command=synth") != std::string::npos);
  CHECK(manifest.find("seed=11") != std::string::npos);
  CHECK(manifest.find("phantom.labels=3") != std::string::npos);
  CHECK(manifest.find("eigen=") != std::string::npos);

  for (const char* m : {"mv", "svwv", "jlf"}) {
    const std::string out = std::string(m) + ".dlfv";
    REQUIRE(run_cli("fuse --config c.txt --method " + std::string(m) + " --data data --target s000 --out " + out).code ==
            0);
    const auto lm = dlf::volcore::read_labels(kRoot / out);
    CHECK(lm.dims() == dlf::volcore::Dims{16, 16, 16});
    for (auto l : lm.labels()) CHECK((l >= 0 && l < 3));
    CHECK(fs::exists(kRoot / (out + ".run.txt")));
  }

  auto e = run_cli("eval --pred mv.dlfv --ref mv.dlfv");
  REQUIRE(e.code == 0);
  CHECK(e.out.find("gdsc=1.000000\n") != std::string::npos);
  CHECK(fs::exists(kRoot / "dlf_eval.run.txt"));

  auto e2 = run_cli("eval --pred mv.dlfv --ref data/subjects/s000/labels.dlfv --labels 1,2 --errormap err.dlfv --out r.txt");
  REQUIRE(e2.code == 0);
  CHECK(slurp(kRoot / "r.txt") == e2.out);
  CHECK(e2.out.find("gdsc_labels=1,2\n") != std::string::npos);
  CHECK(dlf::volcore::read_volume(kRoot / "err.dlfv").channels() == 1);

  auto t = run_cli("ttest --x 1,2,3,4,5 --y 0,0,0,0,0");
  REQUIRE(t.code == 0);
  CHECK(t.out.find("t=4.24264068712\n") != std::string::npos);
  CHECK(t.out.find("df=4\n") != std::string::npos);
}

TEST_CASE("full ablation reproduces majority voting byte for byte") {
  Fixture f;
  // Search radius 0 so candidates are used as given.
  std::string cfg = kConfig;
  cfg.erase(cfg.find("fusion.search_radius = 1\n"));
  write(kRoot / "r0.txt", cfg + "fusion.search_radius = 0\n");
  REQUIRE(run_cli("synth --config r0.txt --out data").code == 0);
  REQUIRE(run_cli("fuse --config r0.txt --method mv --data data --target s001 --out mv.dlfv").code == 0);
  REQUIRE(run_cli("ablate --config r0.txt --drop wv --drop ft --drop mask --data data --target s001 --out abl.dlfv")
              .code == 0);
  CHECK(slurp(kRoot / "mv.dlfv") == slurp(kRoot / "abl.dlfv"));
  CHECK(slurp(kRoot / "abl.dlfv.run.txt").find("ablate.mask=1") != std::string::npos);
}

TEST_CASE("training and inference are reproducible") {
  Fixture f;
  REQUIRE(run_cli("synth --config c.txt --out data").code == 0);
  const std::string subjects = " --subjects s001,s002,s003,s004";
  auto a = run_cli("train --config c.txt --model dlf --data data --out ck_a" + subjects);
  REQUIRE(a.code == 0);
  CHECK(a.out.find("loss.epoch2=") != std::string::npos);
  REQUIRE(run_cli("train --config c.txt --model dlf --data data --out ck_b" + subjects).code == 0);
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(kRoot / "ck_a")) {
    const auto rel = fs::relative(entry.path(), kRoot / "ck_a");
    if (!entry.is_regular_file() || rel == "run_manifest.txt") continue;
    CHECK(slurp(entry.path()) == slurp(kRoot / "ck_b" / rel));
    ++files;
  }
  CHECK(files > 1);

  REQUIRE(run_cli("infer --config c.txt --model ck_a --data data --target s000 --atlases s001,s002,s003 --out a.dlfv")
              .code == 0);
  REQUIRE(run_cli("infer --config c.txt --model ck_b --data data --target s000 --atlases s001,s002,s003 --out b.dlfv "
              "--logits b_logits.dlfv --lcc")
              .code == 0);
  const auto pa = dlf::volcore::read_labels(kRoot / "a.dlfv");
  CHECK(pa.dims() == dlf::volcore::Dims{16, 16, 16});
  CHECK(dlf::volcore::read_volume(kRoot / "b_logits.dlfv").channels() == 3);
  REQUIRE(run_cli("infer --config c.txt --model ck_b --data data --target s000 --atlases s001,s002,s003 --out c.dlfv")
              .code == 0);
  CHECK(slurp(kRoot / "a.dlfv") == slurp(kRoot / "c.dlfv"));

  // More workers, same bytes.
  REQUIRE(run_cli("infer --config c.txt --workers 3 --model ck_a --data data --target s000 --atlases s001,s002,s003 "
              "--out d.dlfv")
              .code == 0);
  CHECK(slurp(kRoot / "a.dlfv") == slurp(kRoot / "d.dlfv"));

  auto u = run_cli("train --config c.txt --model unet --data data --out unet" + subjects);
  REQUIRE(u.code == 0);
  REQUIRE(run_cli("infer --config c.txt --model unet --data data --target s000 --out u.dlfv").code == 0);
  CHECK(run_cli("infer --config c.txt --model unet --data data --target s000 --atlases s001 --out u.dlfv").code == 2);
  CHECK(run_cli("infer --config c.txt --model ck_a --data data --target s999 --out x.dlfv").code == 2);

  // Trained weights with components switched off.
  REQUIRE(run_cli("ablate --config c.txt --drop mask --model ck_a --data data --target s000 --out abl.dlfv").code == 0);
}
