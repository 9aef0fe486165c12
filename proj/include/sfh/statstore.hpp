#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sfh/gmm.hpp"
#include "sfh/nn.hpp"

// Cross-site exchange of weights and aggregate GMM statistics. Nothing in
// this module touches raw samples or per-sample features.

namespace sfh {

struct BundleMeta {
  std::uint32_t format_version = 1;
  int k = 0;
  int n_features = 0;
  TaskSpec::Kind task = TaskSpec::Kind::Classification;
  std::int64_t created_unix = 0;
  std::string site_id;
};

struct StatsBundle {
  SplitModel model;  // architecture and weights
  GmmParams stats;   // k == 0 marks a weights-only bundle
  BundleMeta meta;

  void validate() const;
};

struct DpConfig {
  double amplitude_fraction = 0.0;  // f; Laplace scale is |w| * f
  std::uint64_t seed = 0;
};

// Binary layout: magic "SFHB", u32 format_version, u64 timestamp at fixed
// offset 8 (skipped by the checksum), u8 task kind, site id (u32 length +
// bytes), architecture table, u32 K, u32 N_Q, weights, stats pi/mu/sigma2,
// trailing u64 FNV-1a checksum. All floats little-endian 64-bit.
std::vector<std::uint8_t> serialize(const StatsBundle& bundle);
StatsBundle deserialize(const std::vector<std::uint8_t>& bytes);

// Per-weight Laplace noise w + Lap(|w| * f). Stats are left untouched.
StatsBundle apply_dp_noise(const StatsBundle& bundle, const DpConfig& dp);

// File registry: <store>/<site>/<version>.sfhb, versions claimed atomically,
// push order recorded in <store>/index.txt.
std::string registry_push(const std::filesystem::path& store,
                          const StatsBundle& bundle);
StatsBundle registry_pull(const std::filesystem::path& store,
                          const std::string& site_id,
                          const std::string& version = "");
std::vector<std::string> registry_versions(const std::filesystem::path& store,
                                           const std::string& site_id);

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t len,
                    std::uint64_t basis = 0xcbf29ce484222325ull);

}  // namespace sfh
