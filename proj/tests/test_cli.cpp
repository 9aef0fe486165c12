#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "doctest.h"
#include "sfh/datasim.hpp"
#include "sfh/nn.hpp"
#include "sfh/statstore.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SFH_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "sfh_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const fs::path& rel) { return (work_dir() / rel).string(); }

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
}

sfh::StatsBundle load_bundle(const fs::path& path) {
  return sfh::deserialize(read_bytes(path));
}

// shared fixture built once: two generated sites, a trained model, a bundle
void ensure_fixture() {
  static bool done = false;
  if (done) return;
  done = true;

  REQUIRE(run_cli("gen --task classification --sites none,blur:1.0 --n-train 30 "
                  "--n-test 10 --n-classes 3 --seed 7 --out " + p("data")) == 0);
  REQUIRE(run_cli("train --data " + p("data/site1_train.sfds") + " --out " +
                  p("model.sfhb") +
                  " --epochs 1 --batch-size 10 --hidden-dim 8 --feature-dim 6 "
                  "--lr 1e-3 --seed 5") == 0);
  REQUIRE(run_cli("export --model " + p("model.sfhb") + " --data " +
                  p("data/site1_train.sfds") + " --out " + p("bundle.sfhb") +
                  " --k 2 --site origin") == 0);
}

}  // namespace

TEST_CASE("argument errors exit with code 2, runtime errors with 1") {
  CHECK(run_cli("") == 2);                        // missing subcommand
  CHECK(run_cli("frobnicate") == 2);              // unknown subcommand
  CHECK(run_cli("gen") == 2);                     // missing required --out
  CHECK(run_cli("gen --out /tmp/x --bogus 1") == 2);
  CHECK(run_cli("gen --task juggling --out /tmp/x") == 2);
  CHECK(run_cli("run --manifest /nonexistent.ini") == 1);
}

TEST_CASE("gen writes loadable, reproducible site files") {
  ensure_fixture();

  for (const auto* name :
       {"site1_train.sfds", "site1_test.sfds", "site2_train.sfds", "site2_test.sfds"})
    CHECK(fs::exists(work_dir() / "data" / name));

  const auto train = sfh::load_sfds(p("data/site1_train.sfds"));
  CHECK(train.size() == 30);
  CHECK(train.n_classes == 3);
  const auto test = sfh::load_sfds(p("data/site2_test.sfds"));
  CHECK(test.size() == 10);

  REQUIRE(run_cli("gen --task classification --sites none,blur:1.0 --n-train 30 "
                  "--n-test 10 --n-classes 3 --seed 7 --out " + p("data_again")) == 0);
  for (const auto* name : {"site1_train.sfds", "site2_test.sfds"})
    CHECK(read_bytes(work_dir() / "data" / name) ==
          read_bytes(work_dir() / "data_again" / name));
}

TEST_CASE("train produces a weights-only checkpoint") {
  ensure_fixture();
  const auto ck = load_bundle(p("model.sfhb"));
  CHECK(ck.meta.k == 0);
  CHECK(ck.meta.site_id == "source");
  CHECK(ck.model.input_dim() == 256);
  CHECK(ck.model.feature_dim == 6);
}

TEST_CASE("export fits stats and can push to a registry") {
  ensure_fixture();
  const auto bundle = load_bundle(p("bundle.sfhb"));
  CHECK(bundle.meta.k == 2);
  CHECK(bundle.meta.site_id == "origin");
  CHECK(bundle.stats.per_feature.size() == 6);

  CHECK(run_cli("export --model " + p("model.sfhb") + " --data " +
                p("data/site1_train.sfds") + " --store " + p("store") +
                " --k 2 --site origin") == 0);
  CHECK(fs::exists(work_dir() / "store" / "origin" / "00000001.sfhb"));

  // neither --out nor --store is a usage error surfaced at runtime
  CHECK(run_cli("export --model " + p("model.sfhb") + " --data " +
                p("data/site1_train.sfds") + " --k 2") == 1);
}

TEST_CASE("adapt finetunes against a bundle file or a registry") {
  ensure_fixture();
  const std::string common = " --data " + p("data/site2_train.sfds") +
                             " --epochs 1 --k 2 --batch-size 10 --lr 1e-5 --seed 9";

  REQUIRE(run_cli("adapt --bundle " + p("bundle.sfhb") + " --out " +
                  p("adapted.sfhb") + common) == 0);
  const auto bundle = load_bundle(p("bundle.sfhb"));
  const auto adapted = load_bundle(p("adapted.sfhb"));
  CHECK(adapted.meta.k == 0);
  REQUIRE(adapted.model.pred_layers.size() == bundle.model.pred_layers.size());
  for (std::size_t l = 0; l < adapted.model.pred_layers.size(); ++l)
    CHECK(adapted.model.pred_layers[l].weights == bundle.model.pred_layers[l].weights);
  CHECK(adapted.model.input_dim() == bundle.model.input_dim());

  SUBCASE("zero epochs copy the bundle weights") {
    REQUIRE(run_cli("adapt --bundle " + p("bundle.sfhb") + " --out " +
                    p("adapted0.sfhb") + " --data " + p("data/site2_train.sfds") +
                    " --epochs 0 --k 2") == 0);
    CHECK(sfh::flatten_params(load_bundle(p("adapted0.sfhb")).model) ==
          sfh::flatten_params(bundle.model));
  }

  SUBCASE("a mismatched component count is a runtime failure") {
    CHECK(run_cli("adapt --bundle " + p("bundle.sfhb") + " --out " +
                  p("bad.sfhb") + " --data " + p("data/site2_train.sfds") +
                  " --epochs 1 --k 3") == 1);
  }

  SUBCASE("pulling from the registry") {
    REQUIRE(run_cli("export --model " + p("model.sfhb") + " --data " +
                    p("data/site1_train.sfds") + " --store " + p("store2") +
                    " --k 2 --site origin") == 0);
    CHECK(run_cli("adapt --store " + p("store2") + " --site origin --out " +
                  p("adapted_reg.sfhb") + common) == 0);
    CHECK(run_cli("adapt --store " + p("store2") + " --out " + p("x.sfhb") +
                  common) == 1);  // --site missing
  }
}

TEST_CASE("infer writes a prediction table") {
  ensure_fixture();
  REQUIRE(fs::exists(work_dir() / "adapted.sfhb"));
  REQUIRE(run_cli("infer --model " + p("adapted.sfhb") + " --bundle " +
                  p("bundle.sfhb") + " --data " + p("data/site2_test.sfds") +
                  " --out " + p("preds.csv")) == 0);

  std::ifstream is(p("preds.csv"));
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  CHECK(line == "index,prediction,label");
  int rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++rows;
    std::istringstream cols(line);
    std::string idx, pred, label;
    std::getline(cols, idx, ',');
    std::getline(cols, pred, ',');
    std::getline(cols, label, ',');
    const double v = std::stod(pred);
    CHECK(v >= 0.0);
    CHECK(v <= 2.0);
    CHECK(v == static_cast<double>(static_cast<int>(v)));
  }
  CHECK(rows == 10);
}

TEST_CASE("eval writes the site report") {
  ensure_fixture();
  REQUIRE(fs::exists(work_dir() / "adapted.sfhb"));
  REQUIRE(run_cli("eval --bundle " + p("bundle.sfhb") + " --site target:" +
                  p("adapted.sfhb") + ":" + p("data/site2_test.sfds") +
                  " --out " + p("evaldir")) == 0);
  CHECK(fs::exists(work_dir() / "evaldir" / "report.txt"));
  CHECK(fs::exists(work_dir() / "evaldir" / "report.csv"));

  CHECK(run_cli("eval --bundle " + p("bundle.sfhb") +
                " --site malformed --out " + p("evaldir2")) == 1);
}

TEST_CASE("run executes a manifest end to end") {
  ensure_fixture();
  const fs::path ini = work_dir() / "exp.ini";
  {
    std::ofstream os(ini);
    os << "[experiment]\n"
          "seed = 11\n"
          "out = " << (work_dir() / "rundir").string() << "\n"
          "n_train = 60\n"
          "n_test = 30\n"
          "n_classes = 3\n"
          "[model]\n"
          "hidden_dim = 8\n"
          "feature_dim = 6\n"
          "[train]\n"
          "epochs = 2\n"
          "batch_size = 20\n"
          "[adapt]\n"
          "k = 2\n"
          "epochs = 1\n"
          "batch_size = 10\n"
          "learning_rate = 1e-5\n"
          "[site origin]\n"
          "shift = none\n"
          "[site dimmed]\n"
          "shift = intensity_down:0.6\n";
  }
  REQUIRE(run_cli("run --manifest " + ini.string()) == 0);
  CHECK(fs::exists(work_dir() / "rundir" / "report.txt"));
  CHECK(fs::exists(work_dir() / "rundir" / "report.csv"));
  CHECK(fs::exists(work_dir() / "rundir" / "checkpoints" / "dimmed.sfhb"));
  CHECK(fs::exists(work_dir() / "rundir" / "store" / "origin" / "00000001.sfhb"));
}
