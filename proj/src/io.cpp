#include "hesd/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hesd/error.hpp"

namespace hesd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- helpers

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Reads the keys of one JSON object, tracking which were consumed so the
// rest can be reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json* raw(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  double number(const std::string& key, double def) {
    const json* v = raw(key);
    if (!v || v->is_null()) return def;
    if (!v->is_number()) throw ConfigError(join(path_, key), "expected a number");
    return v->get<double>();
  }

  std::optional<double> optional_number(const std::string& key) {
    const json* v = raw(key);
    if (!v || v->is_null()) return std::nullopt;
    if (!v->is_number()) throw ConfigError(join(path_, key), "expected a number or null");
    return v->get<double>();
  }

  std::uint64_t unsigned_int(const std::string& key, std::uint64_t def) {
    const json* v = raw(key);
    if (!v || v->is_null()) return def;
    if (!v->is_number_integer() || (v->is_number_integer() && v->get<std::int64_t>() < 0 &&
                                    !v->is_number_unsigned()))
      throw ConfigError(join(path_, key), "expected a non-negative integer");
    return v->get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = raw(key);
    if (!v || v->is_null()) return def;
    if (!v->is_boolean()) throw ConfigError(join(path_, key), "expected true or false");
    return v->get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) {
    const json* v = raw(key);
    if (!v || v->is_null()) return def;
    if (!v->is_string()) throw ConfigError(join(path_, key), "expected a string");
    return v->get<std::string>();
  }

  std::vector<std::string> strings(const std::string& key) {
    const json* v = raw(key);
    if (!v || v->is_null()) return {};
    if (!v->is_array()) throw ConfigError(join(path_, key), "expected an array of strings");
    std::vector<std::string> out;
    for (const auto& x : *v) {
      if (!x.is_string()) throw ConfigError(join(path_, key), "expected an array of strings");
      out.push_back(x.get<std::string>());
    }
    return out;
  }

  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> def) {
    const json* v = raw(key);
    if (!v || v->is_null()) return def;
    if (!v->is_array()) throw ConfigError(join(path_, key), "expected an array of integers");
    std::vector<std::size_t> out;
    for (const auto& x : *v) {
      if (!x.is_number_unsigned()) throw ConfigError(join(path_, key), "expected an array of positive integers");
      out.push_back(x.get<std::size_t>());
    }
    return out;
  }

  template <class Parse>
  auto parsed(const std::string& key, const std::string& def, Parse parse) {
    const std::string text = string(key, def);
    try {
      return parse(text);
    } catch (const ConfigError& e) {
      throw ConfigError(join(path_, key), e.detail());
    }
  }

  /// Throws on keys never consumed.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError(join(path_, key), "unknown key");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void check_schema(const json& j, const std::string& kind) {
  if (!j.is_object()) throw FormatError(kind + ": expected a JSON object");
  auto it = j.find("schema_version");
  if (it == j.end() || !it->is_number_integer())
    throw FormatError(kind + ": missing schema_version");
  const auto version = it->get<std::int64_t>();
  if (version > kSchemaVersion)
    throw FormatError(kind + ": schema_version " + std::to_string(version) +
                      " is newer than supported version " + std::to_string(kSchemaVersion));
  if (version < 1) throw FormatError(kind + ": invalid schema_version");
  if (j.contains("kind") && j.at("kind") != kind)
    throw FormatError("expected a " + kind + " document, found " + j.at("kind").dump());
}

json nullable(const std::optional<double>& x) {
  if (!x || !std::isfinite(*x)) return nullptr;
  return *x;
}

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

std::optional<double> read_optional(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) throw FormatError(std::string("field '") + key + "' must be a number or null");
  return it->get<double>();
}

template <class T>
T read(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type");
  }
}

json segments_json(const SegmentTable& layout) {
  json out = json::array();
  for (const auto& s : layout.segments())
    out.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.offset}});
  return out;
}

}  // namespace

// ---------------------------------------------------------------- run config

void AnalysisConfig::validate() const {
  if (slq.probes == 0) throw ConfigError("analysis.probes", "must be at least 1");
  if (slq.steps == 0) throw ConfigError("analysis.steps", "must be at least 1");
  if (!(slq.sigma_factor > 0.0)) throw ConfigError("analysis.sigma_factor", "must be positive");
  if (slq.grid_points < 2) throw ConfigError("analysis.grid_points", "must be at least 2");
  if (!(qs_relative > 0.0)) throw ConfigError("analysis.qs_relative", "must be positive");
  if (!(qs_absolute > 0.0)) throw ConfigError("analysis.qs_absolute", "must be positive");
  try {
    thresholds.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("analysis." + e.field(), e.detail());
  }
}

QsTolerance AnalysisConfig::qs(std::optional<double> baseline) const {
  QsTolerance q;
  q.relative = qs_relative;
  q.absolute_fallback = qs_absolute;
  q.baseline = baseline;
  return q;
}

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig d = dataset;
  d.input_dim = model.input_dim;
  d.classes = model.classes;
  return d;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  if (run_id.empty()) throw ConfigError("run_id", "must not be empty");
  if (run_id.find_first_of("/\\") != std::string::npos)
    throw ConfigError("run_id", "must not contain path separators");
  model.validate();
  dataset_config().validate();
  Model m(model);
  optimizer.validate(&m.layout());
  train.validate();
  for (const auto& name : train.reinitialize)
    if (!m.layout().find(name)) throw ConfigError("train.reinitialize", "no segment named '" + name + "'");
  analysis.validate();
}

json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["run_id"] = c.run_id;
  j["seed"] = c.seed;
  j["model"] = {{"kind", to_string(c.model.kind)},
                {"input_dim", c.model.input_dim},
                {"hidden", c.model.hidden},
                {"classes", c.model.classes},
                {"activation", to_string(c.model.activation)},
                {"batchnorm", c.model.use_batchnorm},
                {"wide_width", c.model.wide_width},
                {"conv_channels", c.model.conv_channels},
                {"kernel_size", c.model.kernel_size},
                {"parameter_cap", c.model.parameter_cap}};
  j["dataset"] = {{"kind", to_string(c.dataset.kind)},
                  {"train_samples", c.dataset.train_samples},
                  {"generalization_samples", c.dataset.generalization_samples},
                  {"seed", c.dataset.seed},
                  {"separation", c.dataset.separation},
                  {"noise", c.dataset.noise},
                  {"shift", c.dataset.shift}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"kind", to_string(o.kind)},
                    {"learning_rate", o.learning_rate},
                    {"momentum", o.momentum},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"epsilon", o.epsilon},
                    {"weight_decay", o.weight_decay},
                    {"hutchinson_probes", o.hutchinson_probes},
                    {"block_size", o.block_size},
                    {"hessian_power", o.hessian_power},
                    {"clip_global_norm", nullable(o.clip_global_norm)},
                    {"frozen", o.frozen}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"checkpoint_every", t.checkpoint_every},
                {"checkpoint_initial", t.checkpoint_initial},
                {"past_plateau_factor", nullable(t.past_plateau_factor)},
                {"reinitialize_io_layers", t.reinitialize_io_layers},
                {"reinitialize", t.reinitialize}};
  const auto& a = c.analysis;
  j["analysis"] = {{"probes", a.slq.probes},
                   {"steps", a.slq.steps},
                   {"sigma_factor", a.slq.sigma_factor},
                   {"seed", a.slq.seed},
                   {"grid_points", a.slq.grid_points},
                   {"ct_threshold", a.thresholds.ct_mp},
                   {"delta_re_threshold", a.thresholds.delta_re},
                   {"delta_kh05_threshold", a.thresholds.delta_kh05},
                   {"qs_relative", a.qs_relative},
                   {"qs_absolute", a.qs_absolute}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  Fields root(j, "");
  const auto version = root.unsigned_int("schema_version", kSchemaVersion);
  if (version > static_cast<std::uint64_t>(kSchemaVersion))
    throw ConfigError("schema_version", "version " + std::to_string(version) + " is newer than supported");
  RunConfig c;
  c.run_id = root.string("run_id", c.run_id);
  c.seed = root.unsigned_int("seed", c.seed);

  if (const json* m = root.raw("model"); m && !m->is_null()) {
    Fields f(*m, "model");
    auto& s = c.model;
    s.kind = f.parsed("kind", to_string(s.kind), parse_model_kind);
    s.input_dim = f.unsigned_int("input_dim", s.input_dim);
    s.hidden = f.sizes("hidden", s.hidden);
    s.classes = f.unsigned_int("classes", s.classes);
    s.activation = f.parsed("activation", to_string(s.activation), parse_activation);
    s.use_batchnorm = f.boolean("batchnorm", s.use_batchnorm);
    s.wide_width = f.unsigned_int("wide_width", s.wide_width);
    s.conv_channels = f.unsigned_int("conv_channels", s.conv_channels);
    s.kernel_size = f.unsigned_int("kernel_size", s.kernel_size);
    s.parameter_cap = f.unsigned_int("parameter_cap", s.parameter_cap);
    f.finish();
  }
  if (const json* d = root.raw("dataset"); d && !d->is_null()) {
    Fields f(*d, "dataset");
    auto& s = c.dataset;
    s.kind = f.parsed("kind", to_string(s.kind), parse_dataset_kind);
    s.train_samples = f.unsigned_int("train_samples", s.train_samples);
    s.generalization_samples = f.unsigned_int("generalization_samples", s.generalization_samples);
    s.seed = f.unsigned_int("seed", s.seed);
    s.separation = f.number("separation", s.separation);
    s.noise = f.number("noise", s.noise);
    s.shift = f.number("shift", s.shift);
    f.finish();
  }
  if (const json* o = root.raw("optimizer"); o && !o->is_null()) {
    Fields f(*o, "optimizer");
    auto& s = c.optimizer;
    s.kind = f.parsed("kind", to_string(s.kind), parse_optimizer_kind);
    s.learning_rate = f.number("learning_rate", s.learning_rate);
    s.momentum = f.number("momentum", s.momentum);
    s.beta1 = f.number("beta1", s.beta1);
    s.beta2 = f.number("beta2", s.beta2);
    s.epsilon = f.number("epsilon", s.epsilon);
    s.weight_decay = f.number("weight_decay", s.weight_decay);
    s.hutchinson_probes = f.unsigned_int("hutchinson_probes", s.hutchinson_probes);
    s.block_size = f.unsigned_int("block_size", s.block_size);
    s.hessian_power = f.number("hessian_power", s.hessian_power);
    s.clip_global_norm = f.optional_number("clip_global_norm");
    s.frozen = f.strings("frozen");
    f.finish();
  }
  if (const json* t = root.raw("train"); t && !t->is_null()) {
    Fields f(*t, "train");
    auto& s = c.train;
    s.epochs = f.unsigned_int("epochs", s.epochs);
    s.batch_size = f.unsigned_int("batch_size", s.batch_size);
    s.checkpoint_every = f.unsigned_int("checkpoint_every", s.checkpoint_every);
    s.checkpoint_initial = f.boolean("checkpoint_initial", s.checkpoint_initial);
    s.past_plateau_factor = f.optional_number("past_plateau_factor");
    s.reinitialize_io_layers = f.boolean("reinitialize_io_layers", s.reinitialize_io_layers);
    s.reinitialize = f.strings("reinitialize");
    f.finish();
  }
  if (const json* a = root.raw("analysis"); a && !a->is_null()) {
    Fields f(*a, "analysis");
    auto& s = c.analysis;
    s.slq.probes = f.unsigned_int("probes", s.slq.probes);
    s.slq.steps = f.unsigned_int("steps", s.slq.steps);
    s.slq.sigma_factor = f.number("sigma_factor", s.slq.sigma_factor);
    s.slq.seed = f.unsigned_int("seed", s.slq.seed);
    s.slq.grid_points = f.unsigned_int("grid_points", s.slq.grid_points);
    s.thresholds.ct_mp = f.number("ct_threshold", s.thresholds.ct_mp);
    s.thresholds.delta_re = f.number("delta_re_threshold", s.thresholds.delta_re);
    s.thresholds.delta_kh05 = f.number("delta_kh05_threshold", s.thresholds.delta_kh05);
    s.qs_relative = f.number("qs_relative", s.qs_relative);
    s.qs_absolute = f.number("qs_absolute", s.qs_absolute);
    f.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError("config", e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json(config).dump())));
  return buf;
}

// ---------------------------------------------------------------- files

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---------------------------------------------------------------- checkpoints

std::string checkpoint_id(const std::string& run_id, std::int64_t epoch) {
  return run_id + "@" + std::to_string(epoch);
}

std::string epoch_stem(std::int64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%06lld", static_cast<long long>(epoch));
  return buf;
}

namespace {

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_doubles(std::string& out, std::span<const double> values) {
  put_u64(out, values.size());
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint64_t u64(const char* what) {
    auto b = take(8, what);
    std::uint64_t x = 0;
    for (int i = 7; i >= 0; --i) x = (x << 8) | static_cast<unsigned char>(b[i]);
    return x;
  }

  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    std::uint32_t x = 0;
    for (int i = 3; i >= 0; --i) x = (x << 8) | static_cast<unsigned char>(b[i]);
    return x;
  }

  std::vector<double> doubles(std::size_t expected, const char* what) {
    const std::uint64_t n = u64(what);
    if (n != expected)
      throw FormatError(std::string(what) + ": payload has " + std::to_string(n) +
                        " values, segment table needs " + std::to_string(expected));
    std::vector<double> out(n);
    for (auto& v : out) v = std::bit_cast<double>(u64(what));
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void check_segments(const json& j, const SegmentTable& layout, const char* what) {
  if (!j.is_array() || j.size() != layout.count())
    throw FormatError(std::string(what) + ": segment table does not match the model");
  for (std::size_t i = 0; i < layout.count(); ++i) {
    const auto& s = layout[i];
    const auto& e = j[i];
    if (read<std::string>(e, "name") != s.name || read<Shape>(e, "shape") != s.shape ||
        read<std::size_t>(e, "offset") != s.offset)
      throw FormatError(std::string(what) + ": segment '" + s.name + "' does not match the model");
  }
}

}  // namespace

std::string encode_checkpoint(const RunConfig& config, const Checkpoint& c) {
  json header;
  header["schema_version"] = kSchemaVersion;
  header["config_hash"] = config_hash(config);
  header["run_config"] = to_json(config);
  header["segments"] = segments_json(c.params.layout());
  header["buffer_segments"] = segments_json(c.buffers.layout());
  header["metadata"] = {{"epoch", c.epoch},
                        {"run_id", c.run_id},
                        {"seed", c.seed},
                        {"optimizer", to_string(c.optimizer)},
                        {"train_accuracy", c.train_accuracy},
                        {"generalization_accuracy", c.generalization_accuracy},
                        {"train_loss", finite_or_null(c.train_loss)}};
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, kCheckpointFormatVersion);
  put_u32(out, c.buffers.size() > 0 ? 1u : 0u);
  put_u64(out, h.size());
  out += h;
  put_doubles(out, c.params.values());
  put_doubles(out, c.buffers.values());
  return out;
}

CheckpointFile decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.take(8, "magic") != std::string_view(kCheckpointMagic, 8))
    throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.u32("version");
  if (version != kCheckpointFormatVersion)
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  const auto flags = r.u32("flags");
  if (flags & ~1u) throw FormatError("unknown checkpoint flags");
  const auto header_len = r.u64("header length");
  json header;
  try {
    header = json::parse(r.take(header_len, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  check_schema(header, "checkpoint");

  CheckpointFile f;
  try {
    f.config = run_config_from_json(header.at("run_config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint run config: ") + e.what());
  } catch (const nlohmann::json::exception&) {
    throw FormatError("checkpoint header lacks run_config");
  }
  if (header.contains("config_hash") && header.at("config_hash") != config_hash(f.config))
    throw FormatError("checkpoint config_hash does not match its run config");

  Model model(f.config.model);
  check_segments(header.value("segments", json()), model.layout(), "parameters");
  check_segments(header.value("buffer_segments", json()), model.buffer_layout(), "buffers");
  if (((flags & 1u) != 0) != (model.buffer_layout().total_size() > 0))
    throw FormatError("checkpoint buffer flag disagrees with the model");

  const json meta = header.value("metadata", json::object());
  auto& c = f.checkpoint;
  c.epoch = read<std::int64_t>(meta, "epoch");
  c.run_id = read<std::string>(meta, "run_id");
  c.seed = read<std::uint64_t>(meta, "seed");
  try {
    c.optimizer = parse_optimizer_kind(read<std::string>(meta, "optimizer"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  c.train_accuracy = read<double>(meta, "train_accuracy");
  c.generalization_accuracy = read<double>(meta, "generalization_accuracy");
  c.train_loss = read_optional(meta, "train_loss").value_or(std::nan(""));
  for (double a : {c.train_accuracy, c.generalization_accuracy})
    if (!(a >= 0.0 && a <= 1.0)) throw FormatError("checkpoint accuracy outside [0, 1]");

  c.params = ParameterVector(model.layout(), r.doubles(model.layout().total_size(), "parameters"));
  c.buffers =
      ParameterVector(model.buffer_layout(), r.doubles(model.buffer_layout().total_size(), "buffers"));
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return f;
}

void save_checkpoint(const fs::path& path, const RunConfig& config, const Checkpoint& checkpoint) {
  write_file_atomic(path, encode_checkpoint(config, checkpoint));
}

CheckpointFile load_checkpoint(const fs::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    throw FormatError(e.what());
  }
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------- reports

json to_json(const CriteriaReport& r) {
  return {{"checkpoint_id", r.checkpoint_id},
          {"dataset_tag", to_string(r.tag)},
          {"hesd_type", to_string(r.hesd_type)},
          {"c_t", finite_or_null(r.c_t)},
          {"no_negative", r.no_negative},
          {"no_positive", r.no_positive},
          {"r_e", nullable(r.r_e)},
          {"k_h05", nullable(r.k_h05)},
          {"lambda_min_neg", r.lambda_min_neg},
          {"lambda_max_pos", r.lambda_max_pos},
          {"epsilon_qs", r.epsilon_qs}};
}

CriteriaReport criteria_report_from_json(const json& j) {
  CriteriaReport r;
  r.checkpoint_id = read<std::string>(j, "checkpoint_id");
  try {
    r.tag = parse_dataset_tag(read<std::string>(j, "dataset_tag"));
    r.hesd_type = parse_hesd_type(read<std::string>(j, "hesd_type"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  r.no_negative = read<bool>(j, "no_negative");
  r.no_positive = read<bool>(j, "no_positive");
  // -inf is stored as null; the flag says which sentinel it was
  r.c_t = read_optional(j, "c_t").value_or(r.no_positive ? -std::numeric_limits<double>::infinity()
                                                         : std::nan(""));
  r.r_e = read_optional(j, "r_e");
  r.k_h05 = read_optional(j, "k_h05");
  r.lambda_min_neg = read<double>(j, "lambda_min_neg");
  r.lambda_max_pos = read<double>(j, "lambda_max_pos");
  r.epsilon_qs = read<double>(j, "epsilon_qs");
  return r;
}

json to_json(const AnalysisRecord& a) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "criteria-report";
  j["run_id"] = a.run_id;
  j["epoch"] = a.epoch;
  const json report = to_json(a.report);
  for (const auto& [key, value] : report.items()) j[key] = value;
  j["train_accuracy"] = a.train_accuracy;
  j["generalization_accuracy"] = a.generalization_accuracy;
  j["slq"] = {{"probes", a.slq.probes},     {"steps", a.slq.steps},
              {"sigma_factor", a.slq.sigma_factor}, {"seed", a.slq.seed},
              {"grid_points", a.slq.grid_points},   {"sigma", a.sigma},
              {"degenerate", a.degenerate}};
  j["density_file"] = a.density_file;
  j["seed"] = a.seed;
  j["config_hash"] = a.config_hash;
  return j;
}

AnalysisRecord analysis_record_from_json(const json& j) {
  check_schema(j, "criteria-report");
  AnalysisRecord a;
  a.report = criteria_report_from_json(j);
  a.run_id = read<std::string>(j, "run_id");
  a.epoch = read<std::int64_t>(j, "epoch");
  a.train_accuracy = read<double>(j, "train_accuracy");
  a.generalization_accuracy = read<double>(j, "generalization_accuracy");
  const json slq = j.value("slq", json::object());
  a.slq.probes = read<std::size_t>(slq, "probes");
  a.slq.steps = read<std::size_t>(slq, "steps");
  a.slq.sigma_factor = read<double>(slq, "sigma_factor");
  a.slq.seed = read<std::uint64_t>(slq, "seed");
  a.slq.grid_points = read<std::size_t>(slq, "grid_points");
  a.sigma = read<double>(slq, "sigma");
  a.degenerate = read<bool>(slq, "degenerate");
  a.density_file = j.value("density_file", "");
  a.seed = read<std::uint64_t>(j, "seed");
  a.config_hash = read<std::string>(j, "config_hash");
  return a;
}

json to_json(const VerdictRecord& v) {
  const auto& d = v.verdict;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "verdict";
  j["checkpoint_id"] = d.checkpoint_id;
  j["applicable"] = d.applicable;
  j["reason"] = to_string(d.reason);
  j["generalization"] = to_string(d.generalization);
  j["delta_re"] = nullable(d.delta_re);
  j["delta_kh05"] = nullable(d.delta_kh05);
  j["note"] = d.note;
  j["summary"] = describe(d);
  j["thresholds"] = {{"ct_threshold", v.thresholds.ct_mp},
                     {"delta_re_threshold", v.thresholds.delta_re},
                     {"delta_kh05_threshold", v.thresholds.delta_kh05}};
  j["seed"] = v.seed;
  j["config_hash"] = v.config_hash;
  return j;
}

VerdictRecord verdict_record_from_json(const json& j) {
  check_schema(j, "verdict");
  VerdictRecord v;
  auto& d = v.verdict;
  d.checkpoint_id = read<std::string>(j, "checkpoint_id");
  d.applicable = read<bool>(j, "applicable");
  try {
    d.reason = parse_verdict_reason(read<std::string>(j, "reason"));
    d.generalization = parse_generalization(read<std::string>(j, "generalization"));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  d.delta_re = read_optional(j, "delta_re");
  d.delta_kh05 = read_optional(j, "delta_kh05");
  d.note = j.value("note", "");
  const json t = j.value("thresholds", json::object());
  v.thresholds.ct_mp = read<double>(t, "ct_threshold");
  v.thresholds.delta_re = read<double>(t, "delta_re_threshold");
  v.thresholds.delta_kh05 = read<double>(t, "delta_kh05_threshold");
  v.seed = read<std::uint64_t>(j, "seed");
  v.config_hash = read<std::string>(j, "config_hash");
  return v;
}

std::string density_csv(const SpectralDensity& d, const AnalysisRecord& a) {
  std::string out;
  out += "# hesd spectral density\n";
  out += "# checkpoint_id=" + a.report.checkpoint_id + "\n";
  out += "# dataset_tag=" + to_string(a.report.tag) + "\n";
  out += "# seed=" + std::to_string(a.seed) + "\n";
  out += "# config_hash=" + a.config_hash + "\n";
  out += "# probes=" + std::to_string(d.probes) + " steps=" + std::to_string(d.steps) +
         " slq_seed=" + std::to_string(d.seed) + " sigma=" + format_double(d.sigma) + "\n";
  out += "lambda,density\n";
  for (std::size_t i = 0; i < d.grid.size(); ++i)
    out += format_double(d.grid[i]) + "," + format_double(d.density[i]) + "\n";
  return out;
}

SpectralDensity parse_density_csv(std::string_view text) {
  SpectralDensity d;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "lambda,density") throw FormatError("density CSV: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("density CSV: malformed row '" + line + "'");
    try {
      d.grid.push_back(std::stod(line.substr(0, comma)));
      d.density.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw FormatError("density CSV: malformed row '" + line + "'");
    }
  }
  if (!header) throw FormatError("density CSV: missing header");
  return d;
}

// ---------------------------------------------------------------- run report

RunReport build_run_report(std::vector<AnalysisRecord> records, const AnalysisConfig& analysis) {
  RunReport out;
  if (records.empty()) return out;
  out.run_id = records.front().run_id;
  out.seed = records.front().seed;
  out.config_hash = records.front().config_hash;
  for (const auto& r : records)
    if (r.config_hash != out.config_hash)
      throw FormatError("analysis records come from different run configs");

  struct Pair {
    const AnalysisRecord* train = nullptr;
    const AnalysisRecord* gen = nullptr;
  };
  std::map<std::pair<std::int64_t, std::string>, Pair> by_checkpoint;
  for (const auto& r : records) {
    auto& p = by_checkpoint[{r.epoch, r.report.checkpoint_id}];
    auto& slot = r.report.tag == DatasetTag::train ? p.train : p.gen;
    if (slot) throw FormatError("duplicate analysis for " + r.report.checkpoint_id);
    slot = &r;
  }

  for (const auto& [key, p] : by_checkpoint) {
    if (!p.train) {
      out.missing.push_back(key.second + ": train analysis");
      continue;
    }
    if (!out.qs_baseline) {
      const double base = std::max(std::abs(p.train->report.lambda_min_neg),
                                   std::abs(p.train->report.lambda_max_pos));
      if (base > 0.0) out.qs_baseline = base;
    }
    const QsTolerance qs = analysis.qs(out.qs_baseline);
    auto reclassify = [&](CriteriaReport r) {
      r.epsilon_qs = qs.epsilon();
      r.hesd_type = classify_hesd(r.c_t, r.lambda_min_neg, r.lambda_max_pos, r.epsilon_qs,
                                  analysis.thresholds.ct_mp);
      return r;
    };
    RunReportRow row;
    row.epoch = key.first;
    row.checkpoint_id = key.second;
    row.train = reclassify(p.train->report);
    row.train_accuracy = p.train->train_accuracy;
    row.generalization_accuracy = p.train->generalization_accuracy;
    if (p.gen) {
      row.generalization = reclassify(p.gen->report);
      row.deltas = delta_criteria(row.train, *row.generalization);
    } else {
      out.missing.push_back(key.second + ": generalization analysis");
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::vector<EpochCandidate> selection_candidates(const RunReport& report) {
  std::vector<EpochCandidate> out;
  for (const auto& row : report.rows)
    out.push_back({row.epoch, row.train.c_t, row.train.lambda_max_pos, row.train_accuracy,
                   row.generalization_accuracy});
  return out;
}

json to_json(const RunReport& r) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "run-report";
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["qs_baseline"] = nullable(r.qs_baseline);
  json rows = json::array();
  for (const auto& row : r.rows) {
    json x;
    x["epoch"] = row.epoch;
    x["checkpoint_id"] = row.checkpoint_id;
    x["train_accuracy"] = row.train_accuracy;
    x["generalization_accuracy"] = row.generalization_accuracy;
    x["train"] = to_json(row.train);
    x["generalization"] = row.generalization ? to_json(*row.generalization) : json(nullptr);
    x["delta_re"] = nullable(row.deltas.delta_re);
    x["delta_kh05"] = nullable(row.deltas.delta_kh05);
    rows.push_back(std::move(x));
  }
  j["rows"] = std::move(rows);
  j["missing"] = r.missing;
  return j;
}

RunReport run_report_from_json(const json& j) {
  check_schema(j, "run-report");
  RunReport r;
  r.run_id = read<std::string>(j, "run_id");
  r.seed = read<std::uint64_t>(j, "seed");
  r.config_hash = read<std::string>(j, "config_hash");
  r.qs_baseline = read_optional(j, "qs_baseline");
  for (const auto& x : j.value("rows", json::array())) {
    RunReportRow row;
    row.epoch = read<std::int64_t>(x, "epoch");
    row.checkpoint_id = read<std::string>(x, "checkpoint_id");
    row.train_accuracy = read<double>(x, "train_accuracy");
    row.generalization_accuracy = read<double>(x, "generalization_accuracy");
    row.train = criteria_report_from_json(x.at("train"));
    if (x.contains("generalization") && !x.at("generalization").is_null())
      row.generalization = criteria_report_from_json(x.at("generalization"));
    row.deltas.delta_re = read_optional(x, "delta_re");
    row.deltas.delta_kh05 = read_optional(x, "delta_kh05");
    r.rows.push_back(std::move(row));
  }
  for (const auto& m : j.value("missing", json::array())) r.missing.push_back(m.get<std::string>());
  std::stable_sort(r.rows.begin(), r.rows.end(),
                   [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  return r;
}

std::string run_report_csv(const RunReport& r) {
  auto opt = [](const std::optional<double>& x) { return x ? format_double(*x) : std::string(); };
  std::string out;
  out += "# hesd run report\n";
  out += "# run_id=" + r.run_id + "\n";
  out += "# seed=" + std::to_string(r.seed) + "\n";
  out += "# config_hash=" + r.config_hash + "\n";
  out += "epoch,checkpoint_id,c_t,r_e,k_h05,lambda_min_neg,lambda_max_pos,hesd_type,"
         "train_accuracy,generalization_accuracy,gen_c_t,gen_r_e,gen_k_h05,gen_hesd_type,"
         "delta_re,delta_kh05\n";
  for (const auto& row : r.rows) {
    const auto& t = row.train;
    out += std::to_string(row.epoch) + "," + row.checkpoint_id + "," + format_double(t.c_t) + "," +
           opt(t.r_e) + "," + opt(t.k_h05) + "," + format_double(t.lambda_min_neg) + "," +
           format_double(t.lambda_max_pos) + "," + to_string(t.hesd_type) + "," +
           format_double(row.train_accuracy) + "," + format_double(row.generalization_accuracy) + ",";
    if (row.generalization) {
      const auto& g = *row.generalization;
      out += format_double(g.c_t) + "," + opt(g.r_e) + "," + opt(g.k_h05) + "," + to_string(g.hesd_type);
    } else {
      out += ",,,";
    }
    out += "," + opt(row.deltas.delta_re) + "," + opt(row.deltas.delta_kh05) + "\n";
  }
  return out;
}

}  // namespace hesd
