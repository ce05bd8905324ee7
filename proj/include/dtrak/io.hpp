#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtrak/attribution.hpp"
#include "dtrak/evaluation.hpp"
#include "dtrak/features.hpp"
#include "dtrak/training.hpp"

namespace dtrak::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr char kMagic[4] = {'D', 'T', 'R', 'K'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class Role : std::uint16_t { kFeatures = 1, kScores = 2, kFTensor = 3, kMasks = 4, kCheckpoint = 5 };
enum class DType : std::uint16_t { kF32 = 1, kF64 = 2 };

inline std::string role_name(Role r) {
  switch (r) {
    case Role::kFeatures: return "features";
    case Role::kScores: return "scores";
    case Role::kFTensor: return "f-tensor";
    case Role::kMasks: return "masks";
    case Role::kCheckpoint: return "checkpoint";
  }
  return "unknown";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw ParameterError("unknown dtype '" + s + "'");
}

/// In-memory form of a .dtrk file: a row-major matrix plus JSON metadata.
struct MatrixFile {
  Role role = Role::kFeatures;
  DType dtype = DType::kF64;
  Mat data;
  json meta = json::object();
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  if (pos + sizeof(T) > in.size()) throw ValidationError("unexpected end of file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

/// Writes `bytes` to a temporary sibling and renames it over `path`.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ValidationError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string encode(const MatrixFile& mf) {
  std::string out(kMagic, 4);
  detail::put_le<std::uint16_t>(out, kFormatVersion);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(mf.role));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(mf.data.rows()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(mf.data.cols()));
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(mf.dtype));
  for (Eigen::Index r = 0; r < mf.data.rows(); ++r) {
    for (Eigen::Index c = 0; c < mf.data.cols(); ++c) {
      if (mf.dtype == DType::kF32) detail::put_le<float>(out, static_cast<float>(mf.data(r, c)));
      else detail::put_le<double>(out, mf.data(r, c));
    }
  }
  const std::string meta = mf.meta.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

inline MatrixFile decode(const std::string& bytes, std::optional<Role> expected = std::nullopt) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("not a DTRK matrix file (bad magic)");
  }
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos);
  if (version != kFormatVersion) {
    throw ValidationError("unsupported DTRK version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kFormatVersion) + ")");
  }
  MatrixFile mf;
  const auto role = detail::get_le<std::uint16_t>(bytes, pos);
  if (role < 1 || role > 5) throw ValidationError("unknown role tag " + std::to_string(role));
  mf.role = static_cast<Role>(role);
  if (expected && *expected != mf.role) {
    throw ValidationError("expected a " + role_name(*expected) + " file, found " + role_name(mf.role));
  }
  const auto rows = detail::get_le<std::uint64_t>(bytes, pos);
  const auto cols = detail::get_le<std::uint64_t>(bytes, pos);
  const auto dtype = detail::get_le<std::uint16_t>(bytes, pos);
  if (dtype != 1 && dtype != 2) throw ValidationError("unknown dtype tag " + std::to_string(dtype));
  mf.dtype = static_cast<DType>(dtype);
  const std::size_t width = mf.dtype == DType::kF32 ? 4 : 8;
  if (rows != 0 && cols > (bytes.size() - pos) / width / rows) {
    throw ValidationError("payload shorter than rows * cols * dtype size");
  }
  mf.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < mf.data.rows(); ++r) {
    for (Eigen::Index c = 0; c < mf.data.cols(); ++c) {
      mf.data(r, c) = mf.dtype == DType::kF32 ? static_cast<double>(detail::get_le<float>(bytes, pos))
                                              : detail::get_le<double>(bytes, pos);
    }
  }
  const auto meta_len = detail::get_le<std::uint64_t>(bytes, pos);
  if (meta_len != bytes.size() - pos) throw ValidationError("metadata length does not match file size");
  try {
    mf.meta = json::parse(bytes.substr(pos));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("corrupt metadata: ") + e.what());
  }
  return mf;
}

inline void save_matrix(const fs::path& path, const MatrixFile& mf) { write_atomic(path, encode(mf)); }

inline MatrixFile load_matrix(const fs::path& path, std::optional<Role> expected = std::nullopt) {
  return decode(read_file(path), expected);
}

// ------------------------------------------------------------------ json helpers

inline json to_json(const TimestepPlan& p) {
  return {{"count", p.count}, {"strategy", strategy_name(p.strategy)}};
}

inline TimestepPlan plan_from_json(const json& j) {
  return {j.at("count").get<int>(), parse_strategy(j.at("strategy").get<std::string>())};
}

inline json to_json(const LossSpec& s) {
  return {{"loss", loss_name(s)}, {"plan", to_json(s.plan)}, {"noises_per_timestep", s.noises_per_timestep}};
}

inline LossSpec loss_from_json(const json& j) {
  LossSpec s = parse_loss_kind(j.at("loss").get<std::string>());
  if (j.contains("plan")) s.plan = plan_from_json(j.at("plan"));
  s.noises_per_timestep = j.value("noises_per_timestep", 1);
  validate(s);
  return s;
}

inline json to_json(const DenoiserArch& a) {
  return {{"input_dim", a.input_dim},
          {"time_embed_dim", a.time_embed_dim},
          {"hidden_dims", a.hidden_dims},
          {"activation", activation_name(a.activation)},
          {"timesteps", a.timesteps}};
}

inline DenoiserArch arch_from_json(const json& j) {
  DenoiserArch a;
  a.input_dim = j.at("input_dim").get<int>();
  a.time_embed_dim = j.at("time_embed_dim").get<int>();
  a.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.timesteps = j.at("timesteps").get<int>();
  a.validate();
  return a;
}

inline std::string mask_to_string(const Mask& m) {
  std::string s(m.size(), '0');
  for (std::size_t i = 0; i < m.size(); ++i) s[i] = m[i] ? '1' : '0';
  return s;
}

inline Mask mask_from_string(const std::string& s) {
  Mask m(s.size(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') throw ValidationError("mask string must contain only 0 and 1");
    m[i] = s[i] == '1';
  }
  return m;
}

// ------------------------------------------------------------------ checkpoints

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  MatrixFile mf;
  mf.role = Role::kCheckpoint;
  mf.dtype = DType::kF64;
  mf.data = c.params.theta.transpose();
  mf.meta = {{"arch", to_json(c.params.arch)},
             {"epoch", c.epoch},
             {"train_config_hash", c.train_config_hash},
             {"dataset_hash", c.dataset_hash},
             {"model_digest", model_digest(c.params)},
             {"subset_mask", c.subset_mask ? json(mask_to_string(*c.subset_mask)) : json(nullptr)}};
  save_matrix(path, mf);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const auto mf = load_matrix(path, Role::kCheckpoint);
  if (mf.data.rows() != 1) throw ValidationError("checkpoint payload must be a single row");
  Checkpoint c;
  c.params = ModelParams(arch_from_json(mf.meta.at("arch")), mf.data.row(0).transpose());
  c.epoch = mf.meta.at("epoch").get<int>();
  c.train_config_hash = mf.meta.at("train_config_hash").get<std::string>();
  c.dataset_hash = mf.meta.at("dataset_hash").get<std::string>();
  if (!mf.meta.at("subset_mask").is_null()) {
    c.subset_mask = mask_from_string(mf.meta.at("subset_mask").get<std::string>());
  }
  if (mf.meta.at("model_digest").get<std::string>() != model_digest(c.params)) {
    throw ValidationError("checkpoint parameters do not match their digest");
  }
  return c;
}

// -------------------------------------------------------------- feature matrices

inline void save_features(const fs::path& path, const GradientFeatureMatrix& fm,
                          DType dtype = DType::kF32, const json& extra = json::object()) {
  MatrixFile mf;
  mf.role = Role::kFeatures;
  mf.dtype = dtype;
  mf.data = fm.phi;
  mf.meta = {{"model_digest", fm.meta.model_digest},
             {"loss", fm.meta.loss},
             {"plan", to_json(fm.meta.plan)},
             {"noises_per_timestep", fm.meta.noises_per_timestep},
             {"noise_seed", fm.meta.noise_seed},
             {"projector_seed", fm.meta.projector_seed},
             {"k", fm.meta.k},
             {"sample_set", fm.meta.sample_set},
             {"sample_keys", fm.meta.sample_keys},
             {"dtype", dtype == DType::kF32 ? "f32" : "f64"},
             {"extra", extra}};
  save_matrix(path, mf);
}

inline GradientFeatureMatrix load_features(const fs::path& path) {
  const auto mf = load_matrix(path, Role::kFeatures);
  GradientFeatureMatrix fm;
  fm.phi = mf.data;
  const auto& m = mf.meta;
  fm.meta.model_digest = m.at("model_digest").get<std::string>();
  fm.meta.loss = m.at("loss").get<std::string>();
  fm.meta.plan = plan_from_json(m.at("plan"));
  fm.meta.noises_per_timestep = m.at("noises_per_timestep").get<int>();
  fm.meta.noise_seed = m.at("noise_seed").get<std::uint64_t>();
  fm.meta.projector_seed = m.at("projector_seed").get<std::uint64_t>();
  fm.meta.k = m.at("k").get<Eigen::Index>();
  fm.meta.sample_set = m.at("sample_set").get<std::string>();
  fm.meta.sample_keys = m.at("sample_keys").get<std::vector<std::uint64_t>>();
  if (static_cast<Eigen::Index>(fm.meta.sample_keys.size()) != fm.phi.rows() || fm.meta.k != fm.phi.cols()) {
    throw ValidationError("feature metadata does not match payload shape");
  }
  return fm;
}

// ---------------------------------------------------------------- score matrices

inline void save_scores(const fs::path& path, const AttributionScoreMatrix& s,
                        DType dtype = DType::kF64, const json& extra = json::object()) {
  MatrixFile mf;
  mf.role = Role::kScores;
  mf.dtype = dtype;
  mf.data = s.scores;
  mf.meta = {{"method", s.meta.method},
             {"loss", s.meta.loss},
             {"k", s.meta.k},
             {"lambda", s.meta.lambda},
             {"model_digests", s.meta.model_digests},
             {"query_keys", s.meta.query_keys},
             {"train_keys", s.meta.train_keys},
             {"dtype", dtype == DType::kF32 ? "f32" : "f64"},
             {"extra", extra}};
  save_matrix(path, mf);
}

inline AttributionScoreMatrix load_scores(const fs::path& path, json* extra = nullptr) {
  const auto mf = load_matrix(path, Role::kScores);
  AttributionScoreMatrix s;
  s.scores = mf.data;
  const auto& m = mf.meta;
  s.meta.method = m.at("method").get<std::string>();
  s.meta.loss = m.at("loss").get<std::string>();
  s.meta.k = m.at("k").get<Eigen::Index>();
  s.meta.lambda = m.at("lambda").get<double>();
  s.meta.model_digests = m.at("model_digests").get<std::vector<std::string>>();
  s.meta.query_keys = m.at("query_keys").get<std::vector<std::uint64_t>>();
  s.meta.train_keys = m.at("train_keys").get<std::vector<std::uint64_t>>();
  if (extra) *extra = m.value("extra", json::object());
  return s;
}

// --------------------------------------------------------------------- benchmarks

/// A benchmark bundle is a directory holding masks.dtrk and F.dtrk.
inline void save_benchmark(const fs::path& dir, const LDSBenchmark& b, const json& extra = json::object()) {
  b.validate();
  MatrixFile masks;
  masks.role = Role::kMasks;
  masks.dtype = DType::kF32;
  masks.data.resize(static_cast<Eigen::Index>(b.subsets()), static_cast<Eigen::Index>(b.train_size()));
  for (std::size_t m = 0; m < b.subsets(); ++m) {
    for (std::size_t i = 0; i < b.train_size(); ++i) {
      masks.data(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(i)) = b.masks[m][i];
    }
  }
  masks.meta = {{"subsets", b.subsets()}, {"train_size", b.train_size()}};
  MatrixFile f;
  f.role = Role::kFTensor;
  f.dtype = DType::kF64;
  const auto cols = static_cast<Eigen::Index>(b.queries() * static_cast<std::size_t>(b.seeds));
  f.data = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      b.F.data(), static_cast<Eigen::Index>(b.subsets()), cols);
  f.meta = {{"seeds", b.seeds},
            {"query_keys", b.query_keys},
            {"output_spec", to_json(b.output_spec)},
            {"noise_seed", b.noise_seed},
            {"output_sign", b.output_sign},
            {"layout", "[subset][seed][query]"},
            {"extra", extra}};
  save_matrix(dir / "masks.dtrk", masks);
  save_matrix(dir / "F.dtrk", f);
}

inline LDSBenchmark load_benchmark(const fs::path& dir) {
  const auto masks = load_matrix(dir / "masks.dtrk", Role::kMasks);
  const auto f = load_matrix(dir / "F.dtrk", Role::kFTensor);
  LDSBenchmark b;
  for (Eigen::Index m = 0; m < masks.data.rows(); ++m) {
    Mask mask(static_cast<std::size_t>(masks.data.cols()));
    for (Eigen::Index i = 0; i < masks.data.cols(); ++i) {
      const double v = masks.data(m, i);
      if (v != 0.0 && v != 1.0) throw ValidationError("mask entries must be 0 or 1");
      mask[static_cast<std::size_t>(i)] = v == 1.0;
    }
    b.masks.push_back(std::move(mask));
  }
  b.seeds = f.meta.at("seeds").get<int>();
  b.query_keys = f.meta.at("query_keys").get<std::vector<std::uint64_t>>();
  b.output_spec = loss_from_json(f.meta.at("output_spec"));
  b.noise_seed = f.meta.at("noise_seed").get<std::uint64_t>();
  b.output_sign = f.meta.at("output_sign").get<double>();
  if (f.data.rows() != masks.data.rows()) throw ValidationError("F tensor and masks differ in subset count");
  b.F.resize(static_cast<std::size_t>(f.data.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      b.F.data(), f.data.rows(), f.data.cols()) = f.data;
  b.validate();
  return b;
}

// ------------------------------------------------------------------------ datasets

/// Samples plus named splits (indices into `samples`).
struct Dataset {
  std::string name;
  Eigen::Index dim = 0;
  std::vector<Sample> samples;
  std::map<std::string, std::vector<std::size_t>> splits;

  SampleSet split(const std::string& which) const {
    auto it = splits.find(which);
    if (it == splits.end()) throw ValidationError("dataset has no split '" + which + "'");
    SampleSet out;
    for (std::size_t i : it->second) out.push_back(samples.at(i));
    return out;
  }

  bool has_split(const std::string& which) const { return splits.contains(which); }
};

/// Writes <stem>.json (manifest) and <stem>.bin (little-endian f64, row-major).
inline void save_dataset(const fs::path& manifest_path, const Dataset& d) {
  std::string bin;
  std::vector<std::uint64_t> keys;
  for (const auto& s : d.samples) {
    if (s.x.size() != d.dim) throw ShapeError("dataset sample dimension mismatch");
    keys.push_back(s.key);
    for (Eigen::Index i = 0; i < s.x.size(); ++i) detail::put_le<double>(bin, s.x[i]);
  }
  fs::path bin_path = manifest_path;
  bin_path.replace_extension(".bin");
  json splits = json::object();
  for (const auto& [k, v] : d.splits) splits[k] = v;
  const json manifest = {{"name", d.name},
                         {"n", d.samples.size()},
                         {"dim", d.dim},
                         {"dtype", "f64"},
                         {"keys", keys},
                         {"splits", splits},
                         {"binary", bin_path.filename().string()},
                         {"digest", dataset_digest(d.samples)}};
  write_atomic(bin_path, bin);
  write_atomic(manifest_path, manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const fs::path& manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ValidationError("bad dataset manifest: " + std::string(e.what()));
  }
  Dataset d;
  d.name = m.value("name", "");
  d.dim = m.at("dim").get<Eigen::Index>();
  const auto n = m.at("n").get<std::size_t>();
  if (m.value("dtype", "f64") != "f64") throw ValidationError("only f64 datasets are supported");
  const auto keys = m.at("keys").get<std::vector<std::uint64_t>>();
  if (keys.size() != n) throw ValidationError("dataset key count differs from n");
  const std::string bin = read_file(manifest_path.parent_path() / m.at("binary").get<std::string>());
  if (bin.size() != n * static_cast<std::size_t>(d.dim) * 8) {
    throw ValidationError("dataset binary has " + std::to_string(bin.size()) + " bytes, expected " +
                          std::to_string(n * static_cast<std::size_t>(d.dim) * 8));
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s{keys[i], Vec(d.dim)};
    for (Eigen::Index j = 0; j < d.dim; ++j) s.x[j] = detail::get_le<double>(bin, pos);
    d.samples.push_back(std::move(s));
  }
  for (const auto& [k, v] : m.at("splits").items()) {
    d.splits[k] = v.get<std::vector<std::size_t>>();
    for (std::size_t i : d.splits[k]) {
      if (i >= n) throw ValidationError("split '" + k + "' indexes past the dataset");
    }
  }
  return d;
}

}  // namespace dtrak::io
