#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sfh/errors.hpp"
#include "sfh/nn.hpp"
#include "sfh/rng.hpp"
#include "sfh/statstore.hpp"

namespace fs = std::filesystem;

namespace {

sfh::StatsBundle sample_bundle(std::uint64_t seed = 601, int k = 2) {
  sfh::StatsBundle b;
  b.model = sfh::make_mlp(6, 5, 4, 3, seed);
  b.meta.k = k;
  b.meta.n_features = 4;
  b.meta.task = sfh::TaskSpec::Kind::Classification;
  b.meta.created_unix = 1750000000;
  b.meta.site_id = "site_a";
  if (k > 0) {
    b.stats.n_components = k;
    b.stats.n_features = 4;
    b.stats.per_feature.resize(4);
    sfh::Rng rng(seed + 1);
    for (auto& g : b.stats.per_feature) {
      double wsum = 0.0;
      for (int j = 0; j < k; ++j) {
        g.weights.push_back(rng.uniform(0.2, 1.0));
        wsum += g.weights[j];
      }
      for (auto& w : g.weights) w /= wsum;
      double mean = rng.uniform(-3.0, 0.0);
      for (int j = 0; j < k; ++j) {
        g.means.push_back(mean);
        g.variances.push_back(rng.uniform(0.2, 2.0));
        mean += rng.uniform(0.5, 2.0);
      }
      g.canonicalize();
    }
  }
  return b;
}

void fix_checksum(std::vector<std::uint8_t>& bytes) {
  const std::size_t payload_end = bytes.size() - 8;
  std::uint64_t h = sfh::fnv1a(bytes.data(), 8);
  h = sfh::fnv1a(bytes.data() + 16, payload_end - 16, h);
  for (int i = 0; i < 8; ++i)
    bytes[payload_end + i] = static_cast<std::uint8_t>(h >> (8 * i));
}

fs::path temp_store(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sfh_statstore_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void check_bundle_equal(const sfh::StatsBundle& a, const sfh::StatsBundle& b) {
  CHECK(sfh::flatten_params(a.model) == sfh::flatten_params(b.model));
  CHECK(sfh::architecture_string(a.model) == sfh::architecture_string(b.model));
  CHECK(a.meta.k == b.meta.k);
  CHECK(a.meta.n_features == b.meta.n_features);
  CHECK(a.meta.task == b.meta.task);
  CHECK(a.meta.created_unix == b.meta.created_unix);
  CHECK(a.meta.site_id == b.meta.site_id);
  REQUIRE(a.stats.per_feature.size() == b.stats.per_feature.size());
  for (std::size_t i = 0; i < a.stats.per_feature.size(); ++i) {
    CHECK(a.stats.per_feature[i].weights == b.stats.per_feature[i].weights);
    CHECK(a.stats.per_feature[i].means == b.stats.per_feature[i].means);
    CHECK(a.stats.per_feature[i].variances == b.stats.per_feature[i].variances);
  }
}

}  // namespace

TEST_CASE("fnv1a matches its reference constants") {
  // Known vectors for 64-bit FNV-1a.
  const std::uint8_t a = 'a';
  CHECK(sfh::fnv1a(&a, 1) == 0xaf63dc4c8601ec8cull);
  const std::uint8_t abc[] = {'a', 'b', 'c'};
  CHECK(sfh::fnv1a(abc, 3) == 0xe71fa2190541574bull);
  CHECK(sfh::fnv1a(nullptr, 0) == 0xcbf29ce484222325ull);
  // chaining equals one pass
  CHECK(sfh::fnv1a(abc + 1, 2, sfh::fnv1a(abc, 1)) == sfh::fnv1a(abc, 3));
}

TEST_CASE("bundles round-trip bit-exactly") {
  const auto bundle = sample_bundle();
  const auto bytes = sfh::serialize(bundle);
  const auto back = sfh::deserialize(bytes);
  check_bundle_equal(bundle, back);

  // a second serialize of the result is byte-identical
  CHECK(sfh::serialize(back) == bytes);
}

TEST_CASE("weights-only bundles carry no stats") {
  const auto bundle = sample_bundle(607, 0);
  const auto bytes = sfh::serialize(bundle);
  const auto back = sfh::deserialize(bytes);
  CHECK(back.meta.k == 0);
  CHECK(back.stats.n_features == 0);
  CHECK(back.stats.per_feature.empty());
  CHECK(sfh::flatten_params(back.model) == sfh::flatten_params(bundle.model));
}

TEST_CASE("every payload byte is covered by the checksum") {
  const auto bundle = sample_bundle();
  const auto bytes = sfh::serialize(bundle);
  REQUIRE(bytes.size() > 48);

  for (std::size_t off = 16; off < bytes.size(); ++off) {
    auto corrupt = bytes;
    corrupt[off] ^= 0x40;
    CHECK_THROWS_AS(sfh::deserialize(corrupt), sfh::ChecksumMismatch);
  }
}

TEST_CASE("header bytes fail with their own error types") {
  const auto bytes = sfh::serialize(sample_bundle());

  for (std::size_t off = 0; off < 4; ++off) {
    auto corrupt = bytes;
    corrupt[off] ^= 0x40;
    CHECK_THROWS_AS(sfh::deserialize(corrupt), sfh::BadMagic);
  }
  for (std::size_t off = 4; off < 8; ++off) {
    auto corrupt = bytes;
    corrupt[off] ^= 0x40;
    CHECK_THROWS_AS(sfh::deserialize(corrupt), sfh::UnsupportedVersion);
  }

  // the timestamp field is excluded from the checksum by design
  auto stamped = bytes;
  stamped[9] ^= 0x01;
  const auto back = sfh::deserialize(stamped);
  CHECK(back.meta.created_unix != sample_bundle().meta.created_unix);

  CHECK_THROWS_AS(sfh::deserialize({'S', 'F'}), sfh::BadMagic);
  CHECK_THROWS_AS(sfh::deserialize({'X', 'F', 'H', 'B', 0, 0, 0, 0}), sfh::BadMagic);
  std::vector<std::uint8_t> short_header = {'S', 'F', 'H', 'B', 1, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(sfh::deserialize(short_header), sfh::Error);
}

TEST_CASE("two serializations differ only in the timestamp field") {
  auto bundle = sample_bundle();
  const auto first = sfh::serialize(bundle);
  bundle.meta.created_unix += 86400;
  const auto second = sfh::serialize(bundle);

  REQUIRE(first.size() == second.size());
  for (std::size_t off = 0; off < first.size(); ++off) {
    if (off >= 8 && off < 16) continue;
    CHECK(first[off] == second[off]);
  }
  CHECK(first != second);
}

TEST_CASE("deserialization re-validates mixture invariants") {
  const auto bundle = sample_bundle();
  auto bytes = sfh::serialize(bundle);

  // first stats value is pi[0] of feature 0; breaking the simplex must be
  // caught even with a valid checksum
  const std::size_t payload_end = bytes.size() - 8;
  const std::size_t stats_len = 3ull * 2 * 4 * 8;
  const std::size_t stats_begin = payload_end - stats_len;
  const double bad = 0.9;
  std::uint64_t raw;
  std::memcpy(&raw, &bad, 8);
  for (int i = 0; i < 8; ++i)
    bytes[stats_begin + i] = static_cast<std::uint8_t>(raw >> (8 * i));
  fix_checksum(bytes);
  CHECK_THROWS_AS(sfh::deserialize(bytes), sfh::InvariantViolation);
}

TEST_CASE("trailing payload bytes are rejected") {
  auto bytes = sfh::serialize(sample_bundle());
  bytes.resize(bytes.size() - 8);  // drop checksum
  bytes.insert(bytes.end(), {0, 0, 0, 0});
  bytes.insert(bytes.end(), 8, 0);  // room for a fresh checksum
  fix_checksum(bytes);
  CHECK_THROWS_AS(sfh::deserialize(bytes), sfh::InvariantViolation);
}

TEST_CASE("bundle validation") {
  auto bundle = sample_bundle();
  bundle.meta.n_features = 7;
  CHECK_THROWS_AS(bundle.validate(), sfh::InvariantViolation);

  auto k_mismatch = sample_bundle();
  k_mismatch.meta.k = 3;
  CHECK_THROWS_AS(k_mismatch.validate(), sfh::InvariantViolation);

  auto stray_stats = sample_bundle();
  stray_stats.meta.k = 0;
  CHECK_THROWS_AS(stray_stats.validate(), sfh::InvariantViolation);

  CHECK_NOTHROW(sample_bundle().validate());
  CHECK_NOTHROW(sample_bundle(613, 0).validate());
}

TEST_CASE("noise injection perturbs weights proportionally and spares the stats") {
  const auto bundle = sample_bundle();

  SUBCASE("zero fraction is the identity") {
    const auto same = sfh::apply_dp_noise(bundle, {0.0, 99});
    CHECK(sfh::flatten_params(same.model) == sfh::flatten_params(bundle.model));
  }

  SUBCASE("an exactly zero weight stays exactly zero") {
    auto modified = bundle;
    auto flat = sfh::flatten_params(modified.model);
    flat[5] = 0.0;
    sfh::load_params(modified.model, flat);

    const auto noised = sfh::apply_dp_noise(modified, {0.5, 123});
    const auto out = sfh::flatten_params(noised.model);
    CHECK(out[5] == 0.0);
    CHECK(out[4] != flat[4]);
    CHECK(out[6] != flat[6]);
  }

  SUBCASE("same seed, same noise; different seed, different noise") {
    const auto a = sfh::apply_dp_noise(bundle, {0.1, 7});
    const auto b = sfh::apply_dp_noise(bundle, {0.1, 7});
    const auto c = sfh::apply_dp_noise(bundle, {0.1, 8});
    CHECK(sfh::flatten_params(a.model) == sfh::flatten_params(b.model));
    CHECK(sfh::flatten_params(a.model) != sfh::flatten_params(c.model));
  }

  SUBCASE("stats bytes are untouched") {
    const auto noised = sfh::apply_dp_noise(bundle, {0.1, 11});
    auto before = sfh::serialize(bundle);
    auto after = sfh::serialize(noised);
    REQUIRE(before.size() == after.size());
    const std::size_t payload_end = before.size() - 8;
    const std::size_t stats_len = 3ull * 2 * 4 * 8;
    bool weights_changed = false;
    for (std::size_t off = 16; off < payload_end - stats_len; ++off)
      if (before[off] != after[off]) weights_changed = true;
    CHECK(weights_changed);
    for (std::size_t off = payload_end - stats_len; off < payload_end; ++off)
      CHECK(before[off] == after[off]);
  }

  SUBCASE("negative fraction is rejected") {
    CHECK_THROWS_AS(sfh::apply_dp_noise(bundle, {-0.1, 0}), sfh::InvariantViolation);
  }
}

TEST_CASE("noise amplitude tracks the expected Laplace scale over a million weights") {
  sfh::StatsBundle big;
  big.model.repr_layers.push_back(
      {sfh::Matrix(1000, 999, 1.0), std::vector<double>(999, 1.0),
       sfh::Activation::Relu});
  big.model.pred_layers.push_back(
      {sfh::Matrix(999, 1, 1.0), std::vector<double>(1, 1.0),
       sfh::Activation::Linear});
  big.model.feature_dim = 999;
  big.meta.k = 0;
  big.meta.n_features = 999;
  big.meta.task = sfh::TaskSpec::Kind::Regression;

  const double f = 0.1;
  const auto noised = sfh::apply_dp_noise(big, {f, 31});
  const auto before = sfh::flatten_params(big.model);
  const auto after = sfh::flatten_params(noised.model);
  double mean_abs = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    mean_abs += std::abs(after[i] - before[i]);
  mean_abs /= static_cast<double>(before.size());
  CHECK(std::abs(mean_abs - f) < 0.01 * f);
}

TEST_CASE("registry push and pull") {
  const fs::path store = temp_store("pushpull");
  const auto bundle = sample_bundle();

  const std::string v1 = sfh::registry_push(store, bundle);
  CHECK(v1 == "00000001");
  const auto pulled = sfh::registry_pull(store, "site_a");
  CHECK(sfh::serialize(pulled) == sfh::serialize(bundle));

  auto updated = bundle;
  auto flat = sfh::flatten_params(updated.model);
  for (auto& w : flat) w += 0.125;
  sfh::load_params(updated.model, flat);
  const std::string v2 = sfh::registry_push(store, updated);
  CHECK(v2 == "00000002");

  const auto latest = sfh::registry_pull(store, "site_a");
  CHECK(sfh::serialize(latest) == sfh::serialize(updated));
  const auto old = sfh::registry_pull(store, "site_a", "00000001");
  CHECK(sfh::serialize(old) == sfh::serialize(bundle));

  CHECK(sfh::registry_versions(store, "site_a") ==
        std::vector<std::string>{"00000001", "00000002"});

  std::ifstream idx(store / "index.txt");
  std::string line1, line2;
  std::getline(idx, line1);
  std::getline(idx, line2);
  CHECK(line1 == "site_a 00000001");
  CHECK(line2 == "site_a 00000002");
}

TEST_CASE("registry failure modes") {
  const fs::path store = temp_store("failures");

  CHECK_THROWS_AS(sfh::registry_pull(store, "nobody"), sfh::NotFound);

  auto bundle = sample_bundle();
  sfh::registry_push(store, bundle);
  CHECK_THROWS_AS(sfh::registry_pull(store, "site_a", "00000005"), sfh::NotFound);

  bundle.meta.site_id = "bad/site";
  CHECK_THROWS_AS(sfh::registry_push(store, bundle), sfh::InvariantViolation);
  bundle.meta.site_id = "";
  CHECK_THROWS_AS(sfh::registry_push(store, bundle), sfh::InvariantViolation);
}

TEST_CASE("a crashed writer's leftover temp file does not block the registry") {
  const fs::path store = temp_store("crash");
  const auto bundle = sample_bundle();
  sfh::registry_push(store, bundle);

  // simulate a writer that died after staging its payload
  {
    std::ofstream os(store / "site_a" / ".tmp-9999-0", std::ios::binary);
    os << "partial";
  }

  const auto pulled = sfh::registry_pull(store, "site_a");
  CHECK(sfh::serialize(pulled) == sfh::serialize(bundle));
  CHECK(sfh::registry_versions(store, "site_a") ==
        std::vector<std::string>{"00000001"});

  const std::string v2 = sfh::registry_push(store, bundle);
  CHECK(v2 == "00000002");
}

TEST_CASE("stats exchange code never touches raw datasets") {
  const fs::path src_dir = fs::path(SFH_SOURCE_DIR);
  for (const auto* rel : {"src/statstore.cpp", "include/sfh/statstore.hpp"}) {
    std::ifstream is(src_dir / rel);
    REQUIRE(is.good());
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("SiteDataset") == std::string::npos);
    CHECK(text.find("datasim") == std::string::npos);
    CHECK(text.find("load_sfds") == std::string::npos);
  }
}
