#include "sfh/statstore.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>

#include "sfh/errors.hpp"
#include "sfh/rng.hpp"

namespace sfh {

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t len, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void StatsBundle::validate() const {
  model.validate();
  if (meta.n_features != model.feature_dim)
    throw InvariantViolation("bundle: meta.n_features != model feature_dim");
  if (meta.k < 0) throw InvariantViolation("bundle: negative k");
  if (meta.k > 0) {
    stats.validate();
    if (stats.n_components != meta.k)
      throw InvariantViolation("bundle: stats K != meta.k");
    if (stats.n_features != model.feature_dim)
      throw InvariantViolation("bundle: stats features != model feature_dim");
  } else if (stats.n_features != 0) {
    throw InvariantViolation("bundle: k == 0 but stats present");
  }
  if (meta.task == TaskSpec::Kind::Regression && model.output_dim() != 1)
    throw InvariantViolation("bundle: regression model must have one output");
  if (meta.task == TaskSpec::Kind::Classification && model.output_dim() < 2)
    throw InvariantViolation("bundle: classification model needs >= 2 outputs");
}

namespace {

constexpr char kMagic[4] = {'S', 'F', 'H', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kTimestampOffset = 8;  // bytes [8,16) skipped by checksum

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw Error("sfhb: truncated payload");
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t v = u64();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.begin() + pos, bytes.begin() + pos + n);
    pos += n;
    return s;
  }
};

std::uint64_t payload_checksum(const std::vector<std::uint8_t>& bytes,
                               std::size_t payload_end) {
  std::uint64_t h = fnv1a(bytes.data(), kTimestampOffset);
  h = fnv1a(bytes.data() + kTimestampOffset + 8,
            payload_end - kTimestampOffset - 8, h);
  return h;
}

char act_char(Activation a) { return a == Activation::Relu ? 'R' : 'L'; }

Activation act_from_char(std::uint8_t c) {
  if (c == 'R') return Activation::Relu;
  if (c == 'L') return Activation::Linear;
  throw InvariantViolation("sfhb: unknown activation tag");
}

}  // namespace

std::vector<std::uint8_t> serialize(const StatsBundle& bundle) {
  bundle.validate();
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, bundle.meta.format_version);
  put_u64(out, static_cast<std::uint64_t>(bundle.meta.created_unix));
  out.push_back(bundle.meta.task == TaskSpec::Kind::Classification ? 0 : 1);
  put_u32(out, static_cast<std::uint32_t>(bundle.meta.site_id.size()));
  out.insert(out.end(), bundle.meta.site_id.begin(), bundle.meta.site_id.end());

  const auto& m = bundle.model;
  put_u32(out, static_cast<std::uint32_t>(m.repr_layers.size() + m.pred_layers.size()));
  auto put_layer = [&out](const Dense& l, char part) {
    put_u32(out, static_cast<std::uint32_t>(l.in_dim()));
    put_u32(out, static_cast<std::uint32_t>(l.out_dim()));
    out.push_back(static_cast<std::uint8_t>(act_char(l.act)));
    out.push_back(static_cast<std::uint8_t>(part));
  };
  for (const auto& l : m.repr_layers) put_layer(l, 'E');
  for (const auto& l : m.pred_layers) put_layer(l, 'P');

  put_u32(out, static_cast<std::uint32_t>(bundle.meta.k));
  put_u32(out, static_cast<std::uint32_t>(bundle.meta.n_features));

  for (double w : flatten_params(m)) put_f64(out, w);

  const int k = bundle.meta.k;
  const int nf = bundle.meta.n_features;
  if (k > 0) {
    auto put_stat = [&](auto&& pick) {
      for (int kk = 0; kk < k; ++kk)
        for (int i = 0; i < nf; ++i) put_f64(out, pick(bundle.stats.per_feature[i], kk));
    };
    put_stat([](const Gmm1D& g, int kk) { return g.weights[kk]; });
    put_stat([](const Gmm1D& g, int kk) { return g.means[kk]; });
    put_stat([](const Gmm1D& g, int kk) { return g.variances[kk]; });
  }

  put_u64(out, payload_checksum(out, out.size()));
  return out;
}

StatsBundle deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw BadMagic("sfhb: too short");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw BadMagic("sfhb: bad magic");
  if (bytes.size() < 33) throw Error("sfhb: truncated header");
  Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw UnsupportedVersion("sfhb: unsupported format version");

  const std::size_t payload_end = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[payload_end + i]) << (8 * i);
  if (payload_checksum(bytes, payload_end) != stored)
    throw ChecksumMismatch("sfhb: checksum mismatch");

  StatsBundle b;
  b.meta.format_version = version;
  b.meta.created_unix = static_cast<std::int64_t>(r.u64());
  b.meta.task =
      r.u8() == 0 ? TaskSpec::Kind::Classification : TaskSpec::Kind::Regression;
  b.meta.site_id = r.str(r.u32());

  const std::uint32_t n_layers = r.u32();
  if (n_layers == 0 || n_layers > 1000) throw InvariantViolation("sfhb: bad layer count");
  SplitModel m;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const std::uint32_t in = r.u32();
    const std::uint32_t outd = r.u32();
    if (in == 0 || outd == 0 || in > 1u << 20 || outd > 1u << 20)
      throw InvariantViolation("sfhb: bad layer dims");
    Dense d;
    d.weights = Matrix(in, outd);
    d.bias.assign(outd, 0.0);
    d.act = act_from_char(r.u8());
    const std::uint8_t part = r.u8();
    if (part == 'E') m.repr_layers.push_back(std::move(d));
    else if (part == 'P') m.pred_layers.push_back(std::move(d));
    else throw InvariantViolation("sfhb: unknown partition tag");
  }
  if (m.repr_layers.empty() || m.pred_layers.empty())
    throw InvariantViolation("sfhb: missing repr or pred layers");
  m.feature_dim = m.repr_layers.back().out_dim();

  b.meta.k = static_cast<int>(r.u32());
  b.meta.n_features = static_cast<int>(r.u32());

  std::vector<double> flat(static_cast<std::size_t>(param_count(m)));
  for (double& w : flat) w = r.f64();
  load_params(m, flat);
  b.model = std::move(m);

  if (b.meta.k > 0) {
    GmmParams stats;
    stats.n_components = b.meta.k;
    stats.n_features = b.meta.n_features;
    stats.per_feature.assign(b.meta.n_features, Gmm1D{});
    for (auto& g : stats.per_feature) {
      g.weights.resize(b.meta.k);
      g.means.resize(b.meta.k);
      g.variances.resize(b.meta.k);
    }
    auto get_stat = [&](auto&& slot) {
      for (int kk = 0; kk < b.meta.k; ++kk)
        for (int i = 0; i < b.meta.n_features; ++i)
          slot(stats.per_feature[i], kk) = r.f64();
    };
    get_stat([](Gmm1D& g, int kk) -> double& { return g.weights[kk]; });
    get_stat([](Gmm1D& g, int kk) -> double& { return g.means[kk]; });
    get_stat([](Gmm1D& g, int kk) -> double& { return g.variances[kk]; });
    b.stats = std::move(stats);
  }
  if (r.pos != payload_end) throw InvariantViolation("sfhb: trailing payload bytes");
  b.validate();
  return b;
}

StatsBundle apply_dp_noise(const StatsBundle& bundle, const DpConfig& dp) {
  if (dp.amplitude_fraction < 0.0)
    throw InvariantViolation("dp: amplitude fraction must be >= 0");
  if (dp.amplitude_fraction == 0.0) return bundle;
  StatsBundle out = bundle;
  Rng rng(dp.seed);
  std::vector<double> flat = flatten_params(out.model);
  for (double& w : flat) w += rng.laplace(std::abs(w) * dp.amplitude_fraction);
  load_params(out.model, flat);
  return out;
}

namespace {

void check_site_id(const std::string& site) {
  if (site.empty()) throw InvariantViolation("registry: empty site id");
  for (char c : site) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (!ok) throw InvariantViolation("registry: site id must be [A-Za-z0-9_-]");
  }
}

std::int64_t parse_version(const std::string& name) {
  if (name.empty()) return -1;
  std::int64_t v = 0;
  for (char c : name) {
    if (c < '0' || c > '9') return -1;
    v = v * 10 + (c - '0');
  }
  return v;
}

std::int64_t max_version(const std::filesystem::path& site_dir) {
  std::int64_t best = 0;
  if (!std::filesystem::exists(site_dir)) return 0;
  for (const auto& e : std::filesystem::directory_iterator(site_dir)) {
    if (e.path().extension() != ".sfhb") continue;
    best = std::max(best, parse_version(e.path().stem().string()));
  }
  return best;
}

std::string version_name(std::int64_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lld", static_cast<long long>(v));
  return buf;
}

std::atomic<std::uint64_t> g_tmp_counter{0};

}  // namespace

std::string registry_push(const std::filesystem::path& store, const StatsBundle& bundle) {
  check_site_id(bundle.meta.site_id);
  const std::vector<std::uint8_t> bytes = serialize(bundle);
  const auto site_dir = store / bundle.meta.site_id;
  std::filesystem::create_directories(site_dir);

  const auto tmp = site_dir / (".tmp-" + std::to_string(::getpid()) + "-" +
                               std::to_string(g_tmp_counter.fetch_add(1)));
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("registry: cannot write " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("registry: write failed for " + tmp.string());
  }

  std::string claimed;
  std::int64_t candidate = max_version(site_dir) + 1;
  for (int attempt = 0; attempt < 64; ++attempt, ++candidate) {
    const auto target = site_dir / (version_name(candidate) + ".sfhb");
    if (::link(tmp.c_str(), target.c_str()) == 0) {
      claimed = version_name(candidate);
      break;
    }
    if (errno != EEXIST) {
      std::filesystem::remove(tmp);
      throw Error("registry: link failed: " + std::string(std::strerror(errno)));
    }
  }
  std::filesystem::remove(tmp);
  if (claimed.empty())
    throw ConcurrentWriteConflict("registry: could not claim a version after 64 tries");

  const std::string line = bundle.meta.site_id + " " + claimed + "\n";
  std::ofstream idx(store / "index.txt", std::ios::app);
  idx.write(line.data(), static_cast<std::streamsize>(line.size()));
  return claimed;
}

StatsBundle registry_pull(const std::filesystem::path& store, const std::string& site_id,
                          const std::string& version) {
  check_site_id(site_id);
  const auto site_dir = store / site_id;
  std::string name = version;
  if (name.empty()) {
    const std::int64_t latest = max_version(site_dir);
    if (latest == 0) throw NotFound("registry: no bundles for site " + site_id);
    name = version_name(latest);
  }
  const auto path = site_dir / (name + ".sfhb");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFound("registry: missing " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::vector<std::string> registry_versions(const std::filesystem::path& store,
                                           const std::string& site_id) {
  check_site_id(site_id);
  std::vector<std::string> out;
  const auto site_dir = store / site_id;
  if (!std::filesystem::exists(site_dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(site_dir)) {
    if (e.path().extension() != ".sfhb") continue;
    if (parse_version(e.path().stem().string()) > 0) out.push_back(e.path().stem().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sfh
