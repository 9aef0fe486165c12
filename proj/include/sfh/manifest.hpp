#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sfh/adapt.hpp"
#include "sfh/datasim.hpp"

namespace sfh {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 50;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int hidden_dim = 64;
  int feature_dim = 32;
  bool all_folds = false;
  int folds = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SiteSpec {
  std::string name;
  ShiftSpec shift;
};

// Flat sectioned key-value experiment description; see manifests/default.ini.
struct Manifest {
  TaskSpec::Kind task = TaskSpec::Kind::Classification;
  std::uint64_t seed = 42;
  std::filesystem::path out_dir = "runs/out";
  int n_train = 5000;
  int n_test = 2000;
  int n_classes = 11;
  std::string method = "sfharmony";  // or entropy, direct_fit
  TrainConfig train;
  AdaptConfig adapt;
  DpConfig dp;
  std::vector<SiteSpec> sites;
  std::vector<int> removed_classes;  // dropped from target train data

  void validate() const;
};

// Missing [experiment] seed falls back to the SFH_SEED environment
// variable, then to 42.
Manifest parse_manifest(const std::filesystem::path& path);
Manifest parse_manifest_text(const std::string& text);

// The shipped 5-site benchmark settings.
Manifest default_manifest();

}  // namespace sfh
