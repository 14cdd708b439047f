#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "hesd/analysis.hpp"
#include "hesd/error.hpp"
#include "hesd/io.hpp"
#include "hesd/rng.hpp"
#include "oracles.hpp"

using namespace hesd;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.run_id = "toy";
  c.seed = 7;
  c.model = ModelSpec::mlp({4, 6, 3}, Activation::tanh);
  c.dataset.train_samples = 60;
  c.dataset.generalization_samples = 60;
  c.dataset.separation = 3.0;
  c.optimizer.learning_rate = 0.05;
  c.train.epochs = 20;
  c.train.checkpoint_every = 10;
  c.analysis.slq.probes = 4;
  c.analysis.slq.steps = 30;
  c.analysis.slq.grid_points = 128;
  return c;
}

Checkpoint checkpoint_for(const RunConfig& c, std::int64_t epoch, std::uint64_t seed) {
  auto built = build_model(c.model, seed);
  Checkpoint k;
  k.epoch = epoch;
  k.params = built.params;
  k.buffers = built.buffers;
  k.train_accuracy = 0.75;
  k.generalization_accuracy = 0.5;
  k.train_loss = 0.693;
  k.optimizer = c.optimizer.kind;
  k.run_id = c.run_id;
  k.seed = c.seed;
  return k;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hesd_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ConfigError config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a ConfigError");
  return ConfigError("", "");
}

AnalysisRecord record(const std::string& run, std::int64_t epoch, DatasetTag tag, double lmin,
                      double lmax, std::optional<double> kh05) {
  AnalysisRecord a;
  a.run_id = run;
  a.epoch = epoch;
  a.seed = 3;
  a.config_hash = "00000000deadbeef";
  a.train_accuracy = 0.9;
  a.generalization_accuracy = 0.8;
  auto& r = a.report;
  r.checkpoint_id = checkpoint_id(run, epoch);
  r.tag = tag;
  r.lambda_min_neg = lmin;
  r.lambda_max_pos = lmax;
  r.no_negative = lmin == 0.0;
  r.no_positive = lmax == 0.0;
  const SignedExtremes e{lmin, lmax, !r.no_negative, !r.no_positive, 0.0};
  r.c_t = compute_ct(e).value;
  r.r_e = compute_re(e);
  r.k_h05 = kh05;
  r.epsilon_qs = 1e-6;
  r.hesd_type = classify_hesd(r.c_t, lmin, lmax, r.epsilon_qs);
  return a;
}

}  // namespace

TEST_CASE("fnv1a64 reference vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("format_double round-trips exactly") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, rng.uniform() * 40 - 20);
    CHECK(std::stod(format_double(x)) == x);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(format_double(std::nan("")) == "nan");
}

TEST_CASE("run config survives a JSON round trip with an identical hash") {
  RunConfig c = small_config();
  c.optimizer.kind = OptimizerKind::adahessian;
  c.optimizer.block_size = 4;
  c.optimizer.clip_global_norm = 2.5;
  c.optimizer.frozen = {"dense0.bias"};
  c.train.past_plateau_factor = 10.0;
  c.train.reinitialize = {"head.bias"};
  const json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(to_json(back).dump() == j.dump());
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);
  CHECK(back.optimizer.clip_global_norm == 2.5);
  CHECK(back.model == c.model);

  RunConfig other = c;
  other.seed += 1;
  CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("missing sections take defaults") {
  const RunConfig c = run_config_from_json(json{{"run_id", "x"}});
  CHECK(c.run_id == "x");
  CHECK(c.train.epochs == TrainConfig{}.epochs);
  CHECK(c.analysis.thresholds.ct_mp == -0.6);
}

TEST_CASE("config errors name the offending field") {
  json j = to_json(small_config());

  SUBCASE("unknown key") {
    j["optimizer"]["learning_rat"] = 0.1;
    CHECK(config_error(j).field() == "optimizer.learning_rat");
  }
  SUBCASE("unknown top-level key") {
    j["extra"] = 1;
    CHECK(config_error(j).field() == "extra");
  }
  SUBCASE("wrong type") {
    j["train"]["epochs"] = "many";
    CHECK(config_error(j).field() == "train.epochs");
  }
  SUBCASE("negative count") {
    j["analysis"]["probes"] = -3;
    CHECK(config_error(j).field() == "analysis.probes");
  }
  SUBCASE("bad enum") {
    j["optimizer"]["kind"] = "lbfgs";
    CHECK(config_error(j).field() == "optimizer.kind");
  }
  SUBCASE("out of range value") {
    j["optimizer"]["learning_rate"] = -1.0;
    CHECK(config_error(j).field() == "optimizer.learning_rate");
  }
  SUBCASE("zero lanczos steps") {
    j["analysis"]["steps"] = 0;
    CHECK(config_error(j).field() == "analysis.steps");
  }
  SUBCASE("frozen segment that does not exist") {
    j["optimizer"]["frozen"] = {"nope"};
    CHECK(config_error(j).field().rfind("optimizer.frozen", 0) == 0);
  }
  SUBCASE("newer schema") {
    j["schema_version"] = kSchemaVersion + 1;
    CHECK(config_error(j).field() == "schema_version");
  }
  SUBCASE("malformed file") {
    auto dir = scratch("malformed");
    write_file_atomic(dir / "c.json", "{not json");
    try {
      load_run_config(dir / "c.json");
      FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "config");
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  RunConfig c = small_config();
  SUBCASE("plain mlp") {}
  SUBCASE("batchnorm buffers") { c.model.use_batchnorm = true; }
  Checkpoint k = checkpoint_for(c, 30, 11);
  // values that a decimal encoding would not preserve
  k.params[0] = std::nextafter(0.1, 1.0);
  k.params[1] = std::numeric_limits<double>::denorm_min();
  k.params[2] = -0.0;
  if (k.buffers.size() > 0) k.buffers[0] = 1.0 / 3.0;

  const std::string bytes = encode_checkpoint(c, k);
  const CheckpointFile f = decode_checkpoint(bytes);
  CHECK(f.checkpoint.epoch == 30);
  CHECK(f.checkpoint.run_id == "toy");
  CHECK(f.checkpoint.seed == 7);
  CHECK(f.checkpoint.train_accuracy == 0.75);
  CHECK(f.checkpoint.params.layout() == k.params.layout());
  CHECK(f.checkpoint.buffers.layout() == k.buffers.layout());
  REQUIRE(f.checkpoint.params.size() == k.params.size());
  CHECK(std::memcmp(f.checkpoint.params.values().data(), k.params.values().data(),
                    k.params.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(f.checkpoint.buffers.values().data(), k.buffers.values().data(),
                    k.buffers.size() * sizeof(double)) == 0);
  CHECK(config_hash(f.config) == config_hash(c));
  // encoding is deterministic
  CHECK(encode_checkpoint(f.config, f.checkpoint) == bytes);

  auto dir = scratch("roundtrip");
  save_checkpoint(dir / "k.ckpt", c, k);
  CHECK(read_file(dir / "k.ckpt") == bytes);
  CHECK_FALSE(fs::exists(dir / "k.ckpt.tmp"));
  CHECK(load_checkpoint(dir / "k.ckpt").checkpoint.params.values()[0] == k.params[0]);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const RunConfig c = small_config();
  const std::string good = encode_checkpoint(c, checkpoint_for(c, 0, 1));

  SUBCASE("bad magic") {
    std::string b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  }
  SUBCASE("newer format version") {
    std::string b = good;
    b[8] = 2;
    CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  }
  SUBCASE("truncated payload") {
    CHECK_THROWS_AS(decode_checkpoint(std::string_view(good).substr(0, good.size() - 3)), FormatError);
  }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(decode_checkpoint(good + "x"), FormatError); }
  SUBCASE("empty") { CHECK_THROWS_AS(decode_checkpoint(""), FormatError); }
  SUBCASE("newer schema in header") {
    std::string b = good;
    const auto pos = b.find("\"schema_version\":1");
    REQUIRE(pos != std::string::npos);
    b[pos + 17] = '9';
    CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  }
  SUBCASE("tampered config") {
    std::string b = good;
    const auto pos = b.find("\"epochs\":20");
    REQUIRE(pos != std::string::npos);
    b[pos + 10] = '1';
    CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/hesd.ckpt"), FormatError);
  }
}

TEST_CASE("criteria report JSON keeps sentinels") {
  AnalysisRecord a = record("r", 10, DatasetTag::generalization, -0.5, 0.0, std::nullopt);
  REQUIRE(a.report.no_positive);
  REQUIRE(std::isinf(a.report.c_t));
  a.slq.probes = 3;
  a.sigma = 0.01;
  a.density_file = "epoch-000010.generalization.density.csv";

  const json j = to_json(a);
  CHECK(j["kind"] == "criteria-report");
  CHECK(j["c_t"].is_null());
  const AnalysisRecord b = analysis_record_from_json(json::parse(j.dump()));
  CHECK(b.report.c_t == -std::numeric_limits<double>::infinity());
  CHECK(b.report.no_positive);
  CHECK_FALSE(b.report.r_e.has_value());
  CHECK(b.report.tag == DatasetTag::generalization);
  CHECK(b.report.hesd_type == a.report.hesd_type);
  CHECK(b.slq.probes == 3);
  CHECK(b.density_file == a.density_file);
  CHECK(to_json(b).dump() == j.dump());

  json newer = j;
  newer["schema_version"] = kSchemaVersion + 1;
  CHECK_THROWS_AS(analysis_record_from_json(newer), FormatError);
  json wrong = j;
  wrong["kind"] = "verdict";
  CHECK_THROWS_AS(analysis_record_from_json(wrong), FormatError);
}

TEST_CASE("criteria report JSON has a stable key set") {
  const json j = to_json(record("r", 0, DatasetTag::train, -0.1, 1.0, 0.2));
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"schema_version", "kind", "run_id", "epoch", "checkpoint_id",
                                         "dataset_tag", "hesd_type", "c_t", "no_negative",
                                         "no_positive", "r_e", "k_h05", "lambda_min_neg",
                                         "lambda_max_pos", "epsilon_qs", "train_accuracy",
                                         "generalization_accuracy", "slq", "density_file", "seed",
                                         "config_hash"});
}

TEST_CASE("verdict JSON round trip") {
  const auto t = record("r", 5, DatasetTag::train, -0.1, 1.0, 0.2).report;
  const auto g = record("r", 5, DatasetTag::generalization, -0.25, 1.0, 0.3).report;
  VerdictRecord v;
  v.verdict = assess(t, g);
  v.seed = 3;
  v.config_hash = "abc";
  const json j = to_json(v);
  CHECK(j["kind"] == "verdict");
  CHECK(j["summary"] == describe(v.verdict));
  const VerdictRecord back = verdict_record_from_json(j);
  CHECK(back.verdict.applicable == v.verdict.applicable);
  CHECK(back.verdict.generalization == v.verdict.generalization);
  CHECK(back.verdict.delta_re == v.verdict.delta_re);
  CHECK(back.verdict.delta_kh05 == v.verdict.delta_kh05);
  CHECK(to_json(back).dump() == j.dump());
}

TEST_CASE("density CSV round trip") {
  SpectralDensity d;
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    d.grid.push_back(-1.0 + i * 0.0412345);
    d.density.push_back(rng.uniform());
  }
  d.probes = 4;
  d.steps = 30;
  d.sigma = 0.0123;
  const auto a = record("r", 0, DatasetTag::train, -0.1, 1.0, 0.2);
  const std::string csv = density_csv(d, a);
  CHECK(csv.find("# seed=3\n") != std::string::npos);
  CHECK(csv.find("# config_hash=00000000deadbeef\n") != std::string::npos);
  const SpectralDensity back = parse_density_csv(csv);
  CHECK(back.grid == d.grid);
  CHECK(back.density == d.density);
  CHECK_THROWS_AS(parse_density_csv("x,y\n1,2\n"), FormatError);
  CHECK_THROWS_AS(parse_density_csv("lambda,density\n1;2\n"), FormatError);
}

TEST_CASE("run report pairs, sorts and reports gaps") {
  std::vector<AnalysisRecord> records{
      record("r", 20, DatasetTag::train, -0.2, 1.0, 0.2),
      record("r", 0, DatasetTag::generalization, -0.3, 2.0, 0.3),
      record("r", 10, DatasetTag::train, -0.1, 1.0, 0.1),
      record("r", 0, DatasetTag::train, -0.3, 2.0, 0.1),
      record("r", 10, DatasetTag::generalization, -0.12, 1.0, 0.11),
      record("r", 30, DatasetTag::generalization, -0.1, 1.0, 0.1),
  };
  const RunReport rep = build_run_report(records, AnalysisConfig{});
  REQUIRE(rep.rows.size() == 3);
  CHECK(rep.rows[0].epoch == 0);
  CHECK(rep.rows[1].epoch == 10);
  CHECK(rep.rows[2].epoch == 20);
  CHECK(rep.missing == std::vector<std::string>{"r@20: generalization analysis", "r@30: train analysis"});
  REQUIRE(rep.qs_baseline.has_value());
  CHECK(*rep.qs_baseline == 2.0);
  for (const auto& row : rep.rows) {
    CHECK(row.train.epsilon_qs == doctest::Approx(2e-3));
    if (!row.generalization) {
      CHECK_FALSE(row.deltas.delta_re.has_value());
      continue;
    }
    const DeltaCriteria d = delta_criteria(row.train, *row.generalization);
    CHECK(row.deltas.delta_re == d.delta_re);
    CHECK(row.deltas.delta_kh05 == d.delta_kh05);
  }
  CHECK(*rep.rows[1].deltas.delta_kh05 == doctest::Approx(1.1));

  const json j = to_json(rep);
  CHECK(j["kind"] == "run-report");
  const RunReport back = run_report_from_json(json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());

  const auto cands = selection_candidates(back);
  REQUIRE(cands.size() == 3);
  CHECK(cands[1].epoch == 10);
  CHECK(cands[1].c_t == rep.rows[1].train.c_t);

  const std::string csv = run_report_csv(rep);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 4 + 1 + 3);
  CHECK(csv.find("# config_hash=00000000deadbeef") != std::string::npos);
}

TEST_CASE("run report reclassifies near-zero spectra as QS against the first epoch") {
  std::vector<AnalysisRecord> records{
      record("r", 0, DatasetTag::train, -3.0, 4.0, 0.1),
      record("r", 50, DatasetTag::train, -1e-4, 2e-3, 0.1),
  };
  REQUIRE(records[1].report.hesd_type == HesdType::mp);
  const RunReport rep = build_run_report(records, AnalysisConfig{});
  CHECK(rep.rows[0].train.hesd_type == HesdType::mn);
  CHECK(rep.rows[1].train.hesd_type == HesdType::qs);
}

TEST_CASE("run report refuses records from different configs") {
  auto a = record("r", 0, DatasetTag::train, -0.1, 1.0, 0.1);
  auto b = record("r", 10, DatasetTag::train, -0.1, 1.0, 0.1);
  b.config_hash = "ffffffffffffffff";
  CHECK_THROWS_AS(build_run_report({a, b}, AnalysisConfig{}), FormatError);
  auto c = a;
  CHECK_THROWS_AS(build_run_report({a, c}, AnalysisConfig{}), FormatError);
}

TEST_CASE("checkpoint analysis matches the dense spectrum") {
  RunConfig c = small_config();
  c.analysis.slq.probes = 4;
  c.analysis.slq.steps = 60;
  const Checkpoint k = checkpoint_for(c, 0, 4);
  const auto out = analyze_checkpoint(c, k, DatasetTag::train, c.analysis);
  CHECK(out.record.report.checkpoint_id == "toy@0");
  CHECK(out.record.config_hash == config_hash(c));

  const Model model(c.model);
  const auto data = make_dataset(c.dataset_config());
  const ClassifierObjective obj(model, k.buffers, data.train, Mode::eval);
  const auto ev = hesd::testing::dense_eigenvalues(dense_hessian(obj, k.params));
  const double lmin = ev.minCoeff();
  const double lmax = ev.maxCoeff();
  // the full Krylov space fits in 60 steps, so the extremes are exact
  CHECK(out.record.report.lambda_max_pos == doctest::Approx(lmax).epsilon(1e-6));
  if (lmin < -1e-4 * lmax)
    CHECK(out.record.report.lambda_min_neg == doctest::Approx(lmin).epsilon(1e-6));

  // deterministic for a fixed seed
  const auto again = analyze_checkpoint(c, k, DatasetTag::train, c.analysis);
  CHECK(to_json(again.record).dump() == to_json(out.record).dump());
}
