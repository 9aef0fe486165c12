#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "sfh/datasim.hpp"
#include "sfh/errors.hpp"
#include "sfh/matrix.hpp"
#include "sfh/nn.hpp"
#include "sfh/rng.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "sfh_datasim_tests";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("shift specs parse and print") {
  const auto down = sfh::parse_shift("intensity_down:0.5");
  CHECK(down.kind == sfh::ShiftSpec::Kind::IntensityDown);
  CHECK(down.param == 0.5);
  CHECK(sfh::shift_to_string(down) == "intensity_down:0.5");

  CHECK(sfh::parse_shift("none").kind == sfh::ShiftSpec::Kind::None);
  CHECK(sfh::parse_shift("intensity_up:1.5").param == 1.5);
  CHECK(sfh::parse_shift("blur:1.0").kind == sfh::ShiftSpec::Kind::GaussianBlur);
  CHECK(sfh::parse_shift("salt_pepper:0.1").kind == sfh::ShiftSpec::Kind::SaltPepper);

  CHECK_THROWS_AS(sfh::parse_shift("sepia:0.2"), sfh::Error);
  CHECK_THROWS_AS(sfh::parse_shift("intensity_down:1.5"), sfh::InvariantViolation);
  CHECK_THROWS_AS(sfh::parse_shift("intensity_up:0.9"), sfh::InvariantViolation);
  CHECK_THROWS_AS(sfh::parse_shift("salt_pepper:1.5"), sfh::InvariantViolation);
  CHECK_THROWS_AS(sfh::parse_shift("blur:-1"), sfh::InvariantViolation);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = sfh::generate_base(200, 5, 900);
  const auto b = sfh::generate_base(200, 5, 900);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);

  const auto c = sfh::generate_base(200, 5, 901);
  CHECK(a.inputs != c.inputs);
}

TEST_CASE("generated images are valid and balanced") {
  const auto ds = sfh::generate_base(5000, 11, 903);
  CHECK_NOTHROW(ds.validate());
  CHECK(ds.size() == 5000);
  CHECK(ds.inputs.cols() == 256);

  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    CHECK(ds.inputs.data()[i] >= 0.0);
    CHECK(ds.inputs.data()[i] <= 1.0);
  }

  std::vector<int> counts(11, 0);
  for (double lab : ds.labels) counts[static_cast<int>(lab)]++;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  CHECK(static_cast<double>(*hi) / static_cast<double>(*lo) <= 1.1);
}

TEST_CASE("a linear probe on raw pixels beats chance comfortably") {
  const auto ds = sfh::generate_base(1500, 11, 907);
  const int n_train = 1200, n_eval = 300, c = 11;

  sfh::Matrix xtr(n_train, 256), xev(n_eval, 256);
  std::vector<double> ytr(n_train), yev(n_eval);
  for (int i = 0; i < n_train; ++i) {
    std::copy(ds.inputs.row(i).begin(), ds.inputs.row(i).end(), xtr.row(i).begin());
    ytr[i] = ds.labels[i];
  }
  for (int i = 0; i < n_eval; ++i) {
    std::copy(ds.inputs.row(n_train + i).begin(), ds.inputs.row(n_train + i).end(),
              xev.row(i).begin());
    yev[i] = ds.labels[n_train + i];
  }

  sfh::Matrix w(256, c);
  std::vector<double> bias(c, 0.0);
  sfh::TaskSpec spec;
  spec.n_classes = c;
  for (int it = 0; it < 80; ++it) {
    sfh::Matrix logits = matmul(xtr, w);
    for (int n = 0; n < n_train; ++n)
      for (int j = 0; j < c; ++j) logits(n, j) += bias[j];
    const auto tl = sfh::task_loss_and_grad(logits, ytr, spec);
    const sfh::Matrix gw = matmul_trans_a(xtr, tl.grad_outputs);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= 0.5 * gw.data()[i];
    for (int j = 0; j < c; ++j) {
      double g = 0.0;
      for (int n = 0; n < n_train; ++n) g += tl.grad_outputs(n, j);
      bias[j] -= 0.5 * g;
    }
  }

  int hits = 0;
  for (int n = 0; n < n_eval; ++n) {
    int best = 0;
    double best_v = -1e300;
    for (int j = 0; j < c; ++j) {
      double v = bias[j];
      for (int k = 0; k < 256; ++k) v += xev(n, k) * w(k, j);
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    if (best == static_cast<int>(yev[n])) ++hits;
  }
  const double accuracy = static_cast<double>(hits) / n_eval;
  CHECK(accuracy > 0.2);  // chance is 1/11
}

TEST_CASE("regression labels are an exact affine map of the latent thickness") {
  const int n = 300;
  const std::uint64_t seed = 911;
  const auto ds = sfh::make_regression(n, seed);
  CHECK(ds.task == sfh::TaskSpec::Kind::Regression);
  CHECK(ds.n_classes == 0);

  // Replay the generator's draw sequence to recover each sample's latent:
  // thickness, then four jitter draws, then one noise draw per pixel.
  sfh::Rng rng(seed);
  double mae = 0.0;
  double label_var_accum = 0.0, label_mean = 0.0;
  for (double lab : ds.labels) label_mean += lab;
  label_mean /= n;
  for (int i = 0; i < n; ++i) {
    const double thickness = rng.uniform(0.8, 3.2);
    for (int skip = 0; skip < 4 + 256; ++skip) rng.uniform();
    const double oracle_pred = 100.0 * (thickness - 0.8) / 2.4;
    mae += std::abs(oracle_pred - ds.labels[i]);
    label_var_accum += (ds.labels[i] - label_mean) * (ds.labels[i] - label_mean);
    CHECK(ds.labels[i] >= 0.0);
    CHECK(ds.labels[i] <= 100.0);
  }
  CHECK(mae / n < 100.0 / 20.0);
  CHECK(label_var_accum / n > 100.0);  // targets genuinely vary

  const auto again = sfh::make_regression(n, seed);
  CHECK(again.inputs == ds.inputs);
  CHECK(again.labels == ds.labels);
}

TEST_CASE("split assignment tags contiguous ranges") {
  auto ds = sfh::generate_base(100, 4, 913);
  sfh::assign_splits(ds, 60, 15, 25);
  for (int i = 0; i < 60; ++i) CHECK(ds.split[i] == sfh::SplitTag::Train);
  for (int i = 60; i < 75; ++i) CHECK(ds.split[i] == sfh::SplitTag::Val);
  for (int i = 75; i < 100; ++i) CHECK(ds.split[i] == sfh::SplitTag::Test);

  CHECK_THROWS_AS(sfh::assign_splits(ds, 60, 15, 20), sfh::InvariantViolation);

  const auto test_only = sfh::filter_split(ds, sfh::SplitTag::Test);
  CHECK(test_only.size() == 25);
  for (std::size_t i = 0; i < 25; ++i) {
    CHECK(test_only.labels[i] == ds.labels[75 + i]);
    CHECK(test_only.split[i] == sfh::SplitTag::Test);
  }
  CHECK(sfh::labels_of_split(ds, sfh::SplitTag::Val).size() == 15);
}

TEST_CASE("intensity shifts rescale and clamp") {
  const auto base = sfh::generate_base(20, 3, 917);

  const auto down = sfh::apply_shift(base, sfh::parse_shift("intensity_down:0.5"));
  for (std::size_t i = 0; i < base.inputs.size(); ++i)
    CHECK(down.inputs.data()[i] == std::clamp(base.inputs.data()[i] * 0.5, 0.0, 1.0));
  CHECK(down.shift.kind == sfh::ShiftSpec::Kind::IntensityDown);
  CHECK(down.labels == base.labels);

  const auto up = sfh::apply_shift(base, sfh::parse_shift("intensity_up:2.5"));
  bool clamped = false;
  for (std::size_t i = 0; i < base.inputs.size(); ++i) {
    CHECK(up.inputs.data()[i] == std::clamp(base.inputs.data()[i] * 2.5, 0.0, 1.0));
    if (up.inputs.data()[i] == 1.0) clamped = true;
  }
  CHECK(clamped);
}

TEST_CASE("blur keeps constant images constant and zero sigma is a no-op") {
  auto flat = sfh::generate_base(3, 2, 919);
  flat.inputs.fill(0.37);

  const auto blurred = sfh::apply_shift(flat, sfh::parse_shift("blur:1.2"));
  for (std::size_t i = 0; i < blurred.inputs.size(); ++i)
    CHECK(std::abs(blurred.inputs.data()[i] - 0.37) < 1e-12);

  const auto base = sfh::generate_base(5, 2, 921);
  const auto zero = sfh::apply_shift(base, sfh::parse_shift("blur:0"));
  CHECK(zero.inputs == base.inputs);

  // blur genuinely spreads mass on structured images
  const auto real = sfh::apply_shift(base, sfh::parse_shift("blur:1.0"));
  CHECK(real.inputs != base.inputs);
}

TEST_CASE("salt and pepper corrupts the expected pixel fraction deterministically") {
  const auto base = sfh::generate_base(100, 4, 923);

  auto spec = sfh::parse_shift("salt_pepper:0.1");
  spec.seed = 77;
  const auto noisy = sfh::apply_shift(base, spec);
  const auto noisy2 = sfh::apply_shift(base, spec);
  CHECK(noisy.inputs == noisy2.inputs);

  std::size_t changed = 0, salted = 0, peppered = 0;
  for (std::size_t i = 0; i < base.inputs.size(); ++i) {
    if (noisy.inputs.data()[i] != base.inputs.data()[i]) {
      ++changed;
      if (noisy.inputs.data()[i] == 1.0) ++salted;
      if (noisy.inputs.data()[i] == 0.0) ++peppered;
    }
  }
  const double frac = static_cast<double>(changed) / base.inputs.size();
  CHECK(frac > 0.09);
  CHECK(frac < 0.11);
  CHECK(salted + peppered == changed);
  CHECK(salted > 0);
  CHECK(peppered > 0);

  auto off = sfh::parse_shift("salt_pepper:0");
  const auto untouched = sfh::apply_shift(base, off);
  CHECK(untouched.inputs == base.inputs);

  auto full = sfh::parse_shift("salt_pepper:1");
  const auto destroyed = sfh::apply_shift(base, full);
  for (std::size_t i = 0; i < destroyed.inputs.size(); ++i) {
    const double v = destroyed.inputs.data()[i];
    CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("a dataset cannot be shifted twice") {
  const auto base = sfh::generate_base(10, 2, 927);
  const auto once = sfh::apply_shift(base, sfh::parse_shift("intensity_down:0.8"));
  CHECK_THROWS_AS(sfh::apply_shift(once, sfh::parse_shift("blur:1.0")),
                  sfh::AlreadyShifted);
}

TEST_CASE("class removal filters training splits only") {
  auto ds = sfh::generate_base(200, 4, 929);
  sfh::assign_splits(ds, 120, 30, 50);

  SUBCASE("an empty set keeps everything") {
    const auto same = sfh::remove_classes(ds, {});
    CHECK(same.inputs == ds.inputs);
    CHECK(same.labels == ds.labels);
  }

  SUBCASE("removed labels vanish from train and val but stay in test") {
    const auto cut = sfh::remove_classes(ds, {0, 1});
    CHECK(cut.size() < ds.size());
    bool test_has_removed = false;
    for (std::size_t i = 0; i < cut.size(); ++i) {
      const int lab = static_cast<int>(cut.labels[i]);
      if (cut.split[i] != sfh::SplitTag::Test) {
        CHECK(lab != 0);
        CHECK(lab != 1);
      } else if (lab == 0 || lab == 1) {
        test_has_removed = true;
      }
    }
    CHECK(test_has_removed);
    CHECK(cut.n_classes == 4);  // the alphabet itself is unchanged

    std::size_t expected = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const int lab = static_cast<int>(ds.labels[i]);
      if (ds.split[i] == sfh::SplitTag::Test || (lab != 0 && lab != 1)) ++expected;
    }
    CHECK(cut.size() == expected);
  }

  SUBCASE("removing all but one class leaves a single-class training set") {
    const auto cut = sfh::remove_classes(ds, {0, 1, 2});
    for (std::size_t i = 0; i < cut.size(); ++i)
      if (cut.split[i] != sfh::SplitTag::Test) CHECK(cut.labels[i] == 3.0);
  }

  SUBCASE("error cases") {
    CHECK_THROWS_AS(sfh::remove_classes(ds, {0, 1, 2, 3}), sfh::WouldEmptyDataset);
    CHECK_THROWS_AS(sfh::remove_classes(ds, {7}), sfh::InvariantViolation);
    const auto reg = sfh::make_regression(20, 931);
    CHECK_THROWS_AS(sfh::remove_classes(reg, {0}), sfh::UnsupportedTask);
  }
}

TEST_CASE("sfds files round-trip") {
  const fs::path dir = temp_dir();
  const fs::path path = dir / "roundtrip.sfds";

  auto ds = sfh::generate_base(50, 3, 937);
  sfh::save_sfds(ds, path);
  const auto loaded = sfh::load_sfds(path);

  CHECK(loaded.inputs == ds.inputs);
  CHECK(loaded.labels == ds.labels);
  CHECK(loaded.width == ds.width);
  CHECK(loaded.n_classes == ds.n_classes);
  CHECK(loaded.task == ds.task);
  for (auto tag : loaded.split) CHECK(tag == sfh::SplitTag::Train);

  const auto reg = sfh::make_regression(20, 941);
  const fs::path rpath = dir / "regression.sfds";
  sfh::save_sfds(reg, rpath);
  const auto rload = sfh::load_sfds(rpath);
  CHECK(rload.task == sfh::TaskSpec::Kind::Regression);
  CHECK(rload.labels == reg.labels);
}

TEST_CASE("sfds load failures are typed") {
  const fs::path dir = temp_dir();

  CHECK_THROWS_AS(sfh::load_sfds(dir / "missing.sfds"), sfh::NotFound);

  const fs::path garbage = dir / "garbage.sfds";
  {
    std::ofstream os(garbage, std::ios::binary);
    os << "XXXXGARBAGE";
  }
  CHECK_THROWS_AS(sfh::load_sfds(garbage), sfh::BadMagic);

  const auto ds = sfh::generate_base(10, 2, 947);
  const fs::path good = dir / "good.sfds";
  sfh::save_sfds(ds, good);

  const fs::path versioned = dir / "versioned.sfds";
  {
    std::ifstream is(good, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
    bytes[4] = 9;
    std::ofstream os(versioned, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(sfh::load_sfds(versioned), sfh::UnsupportedVersion);

  const fs::path cut = dir / "truncated.sfds";
  {
    std::ifstream is(good, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
    std::ofstream os(cut, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(sfh::load_sfds(cut), sfh::Error);
}

TEST_CASE("dataset validation catches inconsistency") {
  auto ds = sfh::generate_base(10, 2, 953);
  ds.labels[0] = 5.0;
  CHECK_THROWS_AS(ds.validate(), sfh::InvariantViolation);

  auto short_labels = sfh::generate_base(10, 2, 953);
  short_labels.labels.pop_back();
  CHECK_THROWS_AS(short_labels.validate(), sfh::InvariantViolation);

  CHECK_THROWS_AS(sfh::generate_base(10, 1, 957), sfh::InvariantViolation);
  CHECK_THROWS_AS(sfh::generate_base(0, 3, 957), sfh::EmptyInput);
}
