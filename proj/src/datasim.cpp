#include "sfh/datasim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

#include "sfh/errors.hpp"
#include "sfh/rng.hpp"

namespace sfh {

void ShiftSpec::validate() const {
  switch (kind) {
    case Kind::None:
      break;
    case Kind::IntensityDown:
      if (!(param > 0.0 && param < 1.0))
        throw InvariantViolation("intensity_down needs 0 < s < 1");
      break;
    case Kind::IntensityUp:
      if (!(param > 1.0)) throw InvariantViolation("intensity_up needs s > 1");
      break;
    case Kind::GaussianBlur:
      if (!(param >= 0.0)) throw InvariantViolation("blur needs sigma >= 0");
      break;
    case Kind::SaltPepper:
      if (!(param >= 0.0 && param <= 1.0))
        throw InvariantViolation("salt_pepper needs p in [0,1]");
      break;
  }
}

ShiftSpec parse_shift(const std::string& text) {
  ShiftSpec s;
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  if (colon != std::string::npos) s.param = std::stod(text.substr(colon + 1));
  if (name == "none") s.kind = ShiftSpec::Kind::None;
  else if (name == "intensity_down") s.kind = ShiftSpec::Kind::IntensityDown;
  else if (name == "intensity_up") s.kind = ShiftSpec::Kind::IntensityUp;
  else if (name == "blur") s.kind = ShiftSpec::Kind::GaussianBlur;
  else if (name == "salt_pepper") s.kind = ShiftSpec::Kind::SaltPepper;
  else throw Error("unknown shift kind: " + name);
  s.validate();
  return s;
}

std::string shift_to_string(const ShiftSpec& shift) {
  char buf[64];
  switch (shift.kind) {
    case ShiftSpec::Kind::None: return "none";
    case ShiftSpec::Kind::IntensityDown:
      std::snprintf(buf, sizeof buf, "intensity_down:%g", shift.param);
      return buf;
    case ShiftSpec::Kind::IntensityUp:
      std::snprintf(buf, sizeof buf, "intensity_up:%g", shift.param);
      return buf;
    case ShiftSpec::Kind::GaussianBlur:
      std::snprintf(buf, sizeof buf, "blur:%g", shift.param);
      return buf;
    case ShiftSpec::Kind::SaltPepper:
      std::snprintf(buf, sizeof buf, "salt_pepper:%g", shift.param);
      return buf;
  }
  throw Error("unreachable shift kind");
}

void SiteDataset::validate() const {
  if (inputs.cols() != static_cast<std::size_t>(width) * width)
    throw InvariantViolation("input width does not match image size");
  if (labels.size() != inputs.rows() || split.size() != inputs.rows())
    throw InvariantViolation("labels/split length does not match inputs");
  if (task == TaskSpec::Kind::Classification) {
    for (double lab : labels)
      if (lab < 0 || lab >= n_classes || lab != std::floor(lab))
        throw InvariantViolation("classification label outside alphabet");
  }
}

namespace {

constexpr int kWidth = 16;

// One oriented bar through a jittered centre, Gaussian cross-section, plus
// low-level background noise. Nothing else in the frame references the
// intensity scale, so a bar's absolute brightness cannot be re-derived from
// the rest of its own image.
void render_bar(std::span<double> img, double angle, double thickness, double amp,
                double cx, double cy, Rng& rng) {
  const double s = std::sin(angle), c = std::cos(angle);
  for (int y = 0; y < kWidth; ++y) {
    for (int x = 0; x < kWidth; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double dist = dx * s - dy * c;  // signed distance to the bar axis
      const double v = amp * std::exp(-dist * dist / (2.0 * thickness * thickness)) +
                       0.10 * rng.uniform();
      img[static_cast<std::size_t>(y) * kWidth + x] = std::clamp(v, 0.0, 1.0);
    }
  }
}

}  // namespace

SiteDataset generate_base(int n_samples, int n_classes, std::uint64_t seed) {
  if (n_classes < 2) throw InvariantViolation("generate_base needs >= 2 classes");
  if (n_samples <= 0) throw EmptyInput("generate_base: n_samples must be positive");
  Rng rng(seed);
  SiteDataset ds;
  ds.width = kWidth;
  ds.n_classes = n_classes;
  ds.task = TaskSpec::Kind::Classification;
  ds.inputs = Matrix(n_samples, kWidth * kWidth);
  ds.labels.resize(n_samples);
  ds.split.assign(n_samples, SplitTag::Train);

  std::vector<int> order(n_samples);
  for (int i = 0; i < n_samples; ++i) order[i] = i;
  rng.shuffle(order);

  // Each class pairs an orientation bin with a brightness band (dark or
  // bright bar), so both the bar geometry and its absolute intensity carry
  // label information.
  const int n_orient = (n_classes + 1) / 2;
  const double angle_step = std::numbers::pi / n_orient;
  for (int i = 0; i < n_samples; ++i) {
    const int label = order[i] % n_classes;  // round-robin, then shuffled order
    const int orient = label % n_orient;
    const bool bright = label >= n_orient;
    const double angle = orient * angle_step + rng.uniform(-0.35, 0.35) * angle_step;
    const double thickness = 1.2 + rng.uniform(-0.4, 0.4);
    const double amp =
        bright ? rng.uniform(0.40, 0.52) : rng.uniform(0.22, 0.34);
    const double cx = (kWidth - 1) / 2.0 + rng.uniform(-1.5, 1.5);
    const double cy = (kWidth - 1) / 2.0 + rng.uniform(-1.5, 1.5);
    render_bar(ds.inputs.row(i), angle, thickness, amp, cx, cy, rng);
    ds.labels[i] = label;
  }
  return ds;
}

SiteDataset make_regression(int n_samples, std::uint64_t seed) {
  if (n_samples <= 0) throw EmptyInput("make_regression: n_samples must be positive");
  Rng rng(seed);
  SiteDataset ds;
  ds.width = kWidth;
  ds.n_classes = 0;
  ds.task = TaskSpec::Kind::Regression;
  ds.inputs = Matrix(n_samples, kWidth * kWidth);
  ds.labels.resize(n_samples);
  ds.split.assign(n_samples, SplitTag::Train);

  constexpr double t_min = 0.8, t_max = 3.2;
  for (int i = 0; i < n_samples; ++i) {
    const double thickness = rng.uniform(t_min, t_max);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double amp = rng.uniform(0.5, 0.7);
    const double cx = (kWidth - 1) / 2.0 + rng.uniform(-1.0, 1.0);
    const double cy = (kWidth - 1) / 2.0 + rng.uniform(-1.0, 1.0);
    render_bar(ds.inputs.row(i), angle, thickness, amp, cx, cy, rng);
    ds.labels[i] = 100.0 * (thickness - t_min) / (t_max - t_min);
  }
  return ds;
}

void assign_splits(SiteDataset& ds, int n_train, int n_val, int n_test) {
  if (n_train < 0 || n_val < 0 || n_test < 0 ||
      static_cast<std::size_t>(n_train) + n_val + n_test != ds.size())
    throw InvariantViolation("assign_splits: counts do not sum to dataset size");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.split[i] = i < static_cast<std::size_t>(n_train)            ? SplitTag::Train
                  : i < static_cast<std::size_t>(n_train) + n_val ? SplitTag::Val
                                                                   : SplitTag::Test;
  }
}

namespace {

void blur_image(std::span<const double> src, std::span<double> dst, int w,
                double sigma) {
  if (sigma == 0.0) {
    std::copy(src.begin(), src.end(), dst.begin());
    return;
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  auto reflect = [w](int i) {
    while (i < 0 || i >= w) i = i < 0 ? -i - 1 : 2 * w - i - 1;
    return i;
  };
  // separable pass: rows then columns
  std::vector<double> tmp(src.size());
  for (int y = 0; y < w; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0.0;
      for (int i = -radius; i <= radius; ++i)
        v += kernel[i + radius] * src[static_cast<std::size_t>(y) * w + reflect(x + i)];
      tmp[static_cast<std::size_t>(y) * w + x] = v;
    }
  for (int y = 0; y < w; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0.0;
      for (int i = -radius; i <= radius; ++i)
        v += kernel[i + radius] * tmp[static_cast<std::size_t>(reflect(y + i)) * w + x];
      dst[static_cast<std::size_t>(y) * w + x] = std::clamp(v, 0.0, 1.0);
    }
}

}  // namespace

SiteDataset apply_shift(const SiteDataset& ds, const ShiftSpec& shift) {
  if (ds.shift.kind != ShiftSpec::Kind::None)
    throw AlreadyShifted("apply_shift: dataset already carries a shift");
  shift.validate();
  SiteDataset out = ds;
  out.shift = shift;
  switch (shift.kind) {
    case ShiftSpec::Kind::None:
      break;
    case ShiftSpec::Kind::IntensityDown:
    case ShiftSpec::Kind::IntensityUp:
      for (std::size_t i = 0; i < out.inputs.size(); ++i)
        out.inputs.data()[i] = std::clamp(out.inputs.data()[i] * shift.param, 0.0, 1.0);
      break;
    case ShiftSpec::Kind::GaussianBlur:
      for (std::size_t n = 0; n < out.size(); ++n)
        blur_image(ds.inputs.row(n), out.inputs.row(n), ds.width, shift.param);
      break;
    case ShiftSpec::Kind::SaltPepper: {
      Rng rng(shift.seed);
      const double half = shift.param / 2.0;
      for (std::size_t i = 0; i < out.inputs.size(); ++i) {
        const double u = rng.uniform();
        if (u < half) out.inputs.data()[i] = 0.0;
        else if (u < shift.param) out.inputs.data()[i] = 1.0;
      }
      break;
    }
  }
  return out;
}

SiteDataset remove_classes(const SiteDataset& ds, const std::set<int>& classes) {
  if (ds.task != TaskSpec::Kind::Classification)
    throw UnsupportedTask("remove_classes: classification only");
  for (int c : classes)
    if (c < 0 || c >= ds.n_classes)
      throw InvariantViolation("remove_classes: class outside alphabet");
  if (static_cast<int>(classes.size()) >= ds.n_classes)
    throw WouldEmptyDataset("remove_classes: at least one class must remain");

  SiteDataset out;
  out.shift = ds.shift;
  out.width = ds.width;
  out.n_classes = ds.n_classes;
  out.task = ds.task;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool removed = ds.split[i] != SplitTag::Test &&
                         classes.count(static_cast<int>(ds.labels[i])) > 0;
    if (!removed) keep.push_back(i);
  }
  if (keep.empty()) throw WouldEmptyDataset("remove_classes: nothing left");
  out.inputs = Matrix(keep.size(), ds.inputs.cols());
  out.labels.resize(keep.size());
  out.split.resize(keep.size());
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const auto src = ds.inputs.row(keep[j]);
    std::copy(src.begin(), src.end(), out.inputs.row(j).begin());
    out.labels[j] = ds.labels[keep[j]];
    out.split[j] = ds.split[keep[j]];
  }
  return out;
}

SiteDataset filter_split(const SiteDataset& ds, SplitTag tag) {
  SiteDataset out;
  out.shift = ds.shift;
  out.width = ds.width;
  out.n_classes = ds.n_classes;
  out.task = ds.task;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] == tag) keep.push_back(i);
  out.inputs = Matrix(keep.size(), ds.inputs.cols());
  out.labels.resize(keep.size());
  out.split.assign(keep.size(), tag);
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const auto src = ds.inputs.row(keep[j]);
    std::copy(src.begin(), src.end(), out.inputs.row(j).begin());
    out.labels[j] = ds.labels[keep[j]];
  }
  return out;
}

std::vector<double> labels_of_split(const SiteDataset& ds, SplitTag tag) {
  std::vector<double> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] == tag) out.push_back(ds.labels[i]);
  return out;
}

namespace {

constexpr char kSfdsMagic[4] = {'S', 'F', 'D', 'S'};
constexpr std::uint32_t kSfdsVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error("sfds: truncated file");
  return v;
}

}  // namespace

void save_sfds(const SiteDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("sfds: cannot open " + path.string() + " for writing");
  os.write(kSfdsMagic, 4);
  write_pod(os, kSfdsVersion);
  write_pod(os, static_cast<std::uint32_t>(ds.width));
  write_pod(os, static_cast<std::uint32_t>(ds.size()));
  write_pod(os, static_cast<std::uint32_t>(ds.n_classes));
  write_pod(os, static_cast<std::uint8_t>(
                    ds.task == TaskSpec::Kind::Classification ? 0 : 1));
  os.write(reinterpret_cast<const char*>(ds.inputs.data()),
           static_cast<std::streamsize>(ds.inputs.size() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size() * sizeof(double)));
  if (!os) throw Error("sfds: write failed for " + path.string());
}

SiteDataset load_sfds(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFound("sfds: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kSfdsMagic, 4) != 0)
    throw BadMagic("sfds: bad magic in " + path.string());
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kSfdsVersion)
    throw UnsupportedVersion("sfds: unsupported version");
  SiteDataset ds;
  ds.width = static_cast<int>(read_pod<std::uint32_t>(is));
  const auto b = read_pod<std::uint32_t>(is);
  ds.n_classes = static_cast<int>(read_pod<std::uint32_t>(is));
  ds.task = read_pod<std::uint8_t>(is) == 0 ? TaskSpec::Kind::Classification
                                            : TaskSpec::Kind::Regression;
  ds.inputs = Matrix(b, static_cast<std::size_t>(ds.width) * ds.width);
  is.read(reinterpret_cast<char*>(ds.inputs.data()),
          static_cast<std::streamsize>(ds.inputs.size() * sizeof(double)));
  ds.labels.resize(b);
  is.read(reinterpret_cast<char*>(ds.labels.data()),
          static_cast<std::streamsize>(b * sizeof(double)));
  if (!is) throw Error("sfds: truncated file " + path.string());
  ds.split.assign(b, SplitTag::Train);
  ds.validate();
  return ds;
}

}  // namespace sfh
