#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "sfh/matrix.hpp"
#include "sfh/nn.hpp"

namespace sfh {

struct ShiftSpec {
  enum class Kind { None, IntensityDown, IntensityUp, GaussianBlur, SaltPepper };
  Kind kind = Kind::None;
  double param = 0.0;  // scale s, sigma, or probability p
  std::uint64_t seed = 0;

  void validate() const;
};

ShiftSpec parse_shift(const std::string& text);
std::string shift_to_string(const ShiftSpec& shift);

enum class SplitTag : std::uint8_t { Train = 0, Val = 1, Test = 2 };

// Flattened grayscale images in [0,1] with labels and per-sample split tags.
struct SiteDataset {
  Matrix inputs;  // B x (width*width)
  std::vector<double> labels;
  std::vector<SplitTag> split;
  ShiftSpec shift;
  int width = 16;
  int n_classes = 0;  // 0 for regression
  TaskSpec::Kind task = TaskSpec::Kind::Classification;

  std::size_t size() const { return inputs.rows(); }
  void validate() const;
};

// Class-conditional oriented bar patterns with per-sample jitter.
// Classes are balanced round-robin; sample order is shuffled.
SiteDataset generate_base(int n_samples, int n_classes, std::uint64_t seed);

// Scalar target driven by bar thickness, range-normalised to [0, 100].
SiteDataset make_regression(int n_samples, std::uint64_t seed);

// Tags the first n_train samples Train, the next n_val Val, the rest Test.
// n_train + n_val + n_test must equal the dataset size.
void assign_splits(SiteDataset& ds, int n_train, int n_val, int n_test);

SiteDataset apply_shift(const SiteDataset& ds, const ShiftSpec& shift);

// Drops the given labels from Train/Val; Test is left untouched.
SiteDataset remove_classes(const SiteDataset& ds, const std::set<int>& classes);

// Subset with only the samples carrying the given tag.
SiteDataset filter_split(const SiteDataset& ds, SplitTag tag);

std::vector<double> labels_of_split(const SiteDataset& ds, SplitTag tag);

void save_sfds(const SiteDataset& ds, const std::filesystem::path& path);
SiteDataset load_sfds(const std::filesystem::path& path);

}  // namespace sfh
