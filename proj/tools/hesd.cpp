// hesd: train toy models, analyze checkpoints, and assess generalization from
// Hessian eigenspectra.
//
// Exit codes: 0 success, 1 runtime or format error, 2 invalid configuration
// or usage (including mismatched checkpoint ids).

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "hesd/analysis.hpp"
#include "hesd/error.hpp"
#include "hesd/io.hpp"

using namespace hesd;
namespace fs = std::filesystem;

namespace {

struct AnalysisFlags {
  std::optional<std::size_t> probes;
  std::optional<std::size_t> steps;
  std::optional<double> sigma_factor;
  std::optional<std::uint64_t> seed;
  std::optional<double> ct_threshold;

  void add_to(CLI::App* app) {
    app->add_option("--probes", probes, "SLQ probe vectors");
    app->add_option("--steps", steps, "Lanczos steps per probe");
    app->add_option("--sigma-factor", sigma_factor, "Gaussian width as a fraction of the spectral span");
    app->add_option("--seed", seed, "SLQ probe seed");
    app->add_option("--ct-threshold", ct_threshold, "MP/MN boundary on C_t");
  }

  AnalysisConfig apply(AnalysisConfig a) const {
    if (probes) a.slq.probes = *probes;
    if (steps) a.slq.steps = *steps;
    if (sigma_factor) a.slq.sigma_factor = *sigma_factor;
    if (seed) a.slq.seed = *seed;
    if (ct_threshold) a.thresholds.ct_mp = *ct_threshold;
    a.validate();
    return a;
  }
};

std::vector<DatasetTag> parse_tags(const std::string& text) {
  if (text == "both") return {DatasetTag::train, DatasetTag::generalization};
  try {
    return {parse_dataset_tag(text)};
  } catch (const ConfigError& e) {
    throw ConfigError("--tag", e.detail());
  }
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

fs::path report_path(const fs::path& ckpt, DatasetTag tag) {
  return ckpt.parent_path() / (ckpt.stem().string() + "." + to_string(tag) + ".report.json");
}

int cmd_train(const std::string& config_path, std::string out_dir) {
  const RunConfig config = load_run_config(config_path);
  if (out_dir.empty()) {
    const char* env = std::getenv("HESD_OUTPUT_DIR");
    out_dir = env && *env ? env : "runs";
  }
  const fs::path dir = fs::path(out_dir) / config.run_id;
  const TrainResult r = train_to_directory(config, dir);

  std::cout << "run " << config.run_id << ": " << r.metrics.size() << " epochs, "
            << r.checkpoints.size() << " checkpoints in " << dir.string() << "\n";
  if (r.plateau_epoch) std::cout << "100% train accuracy at epoch " << *r.plateau_epoch << "\n";
  if (!r.metrics.empty())
    std::cout << "final train accuracy " << format_double(r.metrics.back().train_accuracy)
              << ", generalization accuracy " << format_double(r.metrics.back().generalization_accuracy)
              << "\n";
  if (r.diverged) {
    std::cerr << "error: training diverged: " << r.divergence_message << "\n";
    return 1;
  }
  return 0;
}

AnalysisRecord analyze_one(const fs::path& ckpt, DatasetTag tag, const AnalysisFlags& flags,
                           std::optional<double> qs_baseline) {
  const CheckpointFile f = load_checkpoint(ckpt);
  const AnalysisConfig analysis = flags.apply(f.config.analysis);
  auto out = analyze_checkpoint(f.config, f.checkpoint, tag, analysis, qs_baseline);
  const fs::path density = ckpt.parent_path() / (ckpt.stem().string() + "." + to_string(tag) + ".density.csv");
  out.record.density_file = density.filename().string();
  write_file_atomic(density, density_csv(out.slq.density, out.record));
  write_file_atomic(report_path(ckpt, tag), json_text(to_json(out.record)));
  return out.record;
}

void print_report(const AnalysisRecord& a) {
  const auto& r = a.report;
  std::cout << r.checkpoint_id << " [" << to_string(r.tag) << "] " << to_string(r.hesd_type)
            << " C_t=" << format_double(r.c_t);
  if (r.r_e) std::cout << " r_e=" << format_double(*r.r_e);
  std::cout << " K_H05=" << (r.k_h05 ? format_double(*r.k_h05) : std::string("undefined"))
            << " lambda=[" << format_double(r.lambda_min_neg) << ", "
            << format_double(r.lambda_max_pos) << "]\n";
}

int cmd_analyze(const std::string& ckpt, const std::string& tag_text, const AnalysisFlags& flags,
                std::optional<double> qs_baseline) {
  for (DatasetTag tag : parse_tags(tag_text)) print_report(analyze_one(ckpt, tag, flags, qs_baseline));
  return 0;
}

std::vector<fs::path> checkpoints_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_sweep(const fs::path& dir, bool analyze, const AnalysisFlags& flags, std::size_t jobs) {
  if (!fs::is_directory(dir)) throw ConfigError("run_dir", dir.string() + " is not a directory");
  const RunConfig config = load_run_config(dir / "config.json");
  const auto ckpts = checkpoints_in(dir);

  if (analyze) {
    struct Task {
      fs::path ckpt;
      DatasetTag tag;
    };
    std::vector<Task> tasks;
    for (const auto& c : ckpts)
      for (DatasetTag t : {DatasetTag::train, DatasetTag::generalization}) tasks.push_back({c, t});
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        try {
          analyze_one(tasks[i].ckpt, tasks[i].tag, flags, std::nullopt);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    };
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, tasks.size()); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  std::vector<AnalysisRecord> records;
  std::vector<std::string> unanalyzed;
  for (const auto& c : ckpts)
    for (DatasetTag t : {DatasetTag::train, DatasetTag::generalization}) {
      const fs::path p = report_path(c, t);
      if (fs::exists(p))
        records.push_back(analysis_record_from_json(read_json(p)));
      else
        unanalyzed.push_back(c.filename().string() + " (" + to_string(t) + ")");
    }
  if (records.empty()) throw ConfigError("run_dir", "no analyzed checkpoints in " + dir.string());

  RunReport report = build_run_report(records, flags.apply(config.analysis));
  write_file_atomic(dir / "run_report.json", json_text(to_json(report)));
  write_file_atomic(dir / "run_report.csv", run_report_csv(report));

  for (const auto& row : report.rows) {
    std::cout << "epoch " << row.epoch << ": " << to_string(row.train.hesd_type)
              << " C_t=" << format_double(row.train.c_t)
              << " lambda_max=" << format_double(row.train.lambda_max_pos);
    if (row.deltas.delta_re) std::cout << " delta_re=" << format_double(*row.deltas.delta_re);
    if (row.deltas.delta_kh05) std::cout << " delta_kh05=" << format_double(*row.deltas.delta_kh05);
    std::cout << "\n";
  }
  for (const auto& m : unanalyzed) std::cerr << "warning: missing analysis for " << m << "\n";
  std::cout << "wrote " << (dir / "run_report.json").string() << " with " << report.rows.size()
            << " rows\n";
  return 0;
}

int cmd_select(const fs::path& path, const std::string& strategy_text, double tie_band) {
  SelectionStrategy strategy;
  try {
    strategy = parse_selection_strategy(strategy_text);
  } catch (const ConfigError& e) {
    throw ConfigError("--strategy", e.detail());
  }
  if (!(tie_band >= 0.0 && tie_band <= 1.0)) throw ConfigError("--tie-band", "must lie in [0, 1]");
  const RunReport report = run_report_from_json(read_json(path));
  const auto candidates = selection_candidates(report);
  if (candidates.empty()) throw ConfigError("run_report", "report has no rows");
  const Selection s = select_checkpoint(candidates, tie_band);
  std::cout << "eligible epochs: " << s.eligible << "\n";
  std::cout << "max-ct: epoch " << s.max_ct_epoch << "\n";
  std::cout << "min-max-eigenvalue: epoch " << s.min_max_eigenvalue_epoch << "\n";
  std::cout << "selected (" << to_string(strategy) << "): "
            << checkpoint_id(report.run_id, s.pick(strategy)) << "\n";
  return 0;
}

int cmd_assess(const fs::path& train_path, const fs::path& gen_path, std::string out,
               const CriteriaThresholds& thresholds) {
  thresholds.validate();
  const AnalysisRecord t = analysis_record_from_json(read_json(train_path));
  const AnalysisRecord g = analysis_record_from_json(read_json(gen_path));
  if (t.report.tag != DatasetTag::train) throw ConfigError("train_report", "not a train-set report");
  if (g.report.tag != DatasetTag::generalization)
    throw ConfigError("generalization_report", "not a generalization-set report");

  VerdictRecord v;
  v.verdict = assess(t.report, g.report, thresholds);
  v.thresholds = thresholds;
  v.seed = t.seed;
  v.config_hash = t.config_hash;
  if (out.empty()) {
    std::string stem = train_path.filename().string();
    const auto dot = stem.find('.');
    out = (train_path.parent_path() / (stem.substr(0, dot) + ".verdict.json")).string();
  }
  write_file_atomic(out, json_text(to_json(v)));
  std::cout << v.verdict.checkpoint_id << ": " << describe(v.verdict) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian eigenspectrum diagnostics for generalization"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint series");
  train_cmd->add_option("config", config_path, "Run config JSON")->required();
  train_cmd->add_option("--out", out_dir, "Output root (default $HESD_OUTPUT_DIR or ./runs)");

  std::string ckpt, tag = "train";
  std::optional<double> qs_baseline;
  AnalysisFlags analyze_flags;
  auto* analyze_cmd = app.add_subcommand("analyze", "Spectral density and criteria for one checkpoint");
  analyze_cmd->add_option("checkpoint", ckpt, "Checkpoint file")->required();
  analyze_cmd->add_option("--tag", tag, "train, generalization or both");
  analyze_cmd->add_option("--qs-baseline", qs_baseline, "max |lambda| of the run's first checkpoint");
  analyze_flags.add_to(analyze_cmd);

  std::string run_dir;
  bool sweep_analyze = false;
  std::size_t jobs = 0;
  AnalysisFlags sweep_flags;
  auto* sweep_cmd = app.add_subcommand("sweep", "Collect per-checkpoint reports into a run report");
  sweep_cmd->add_option("run_dir", run_dir, "Directory written by train")->required();
  sweep_cmd->add_flag("--analyze", sweep_analyze, "Analyze every checkpoint first");
  sweep_cmd->add_option("--jobs", jobs, "Concurrent analyses (default: hardware threads)");
  sweep_flags.add_to(sweep_cmd);

  std::string report_file, strategy = "max-ct";
  double tie_band = kDefaultTieBand;
  auto* select_cmd = app.add_subcommand("select", "Pick a checkpoint from a run report");
  select_cmd->add_option("run_report", report_file, "run_report.json")->required();
  select_cmd->add_option("--strategy", strategy, "max-ct or min-max-eigenvalue");
  select_cmd->add_option("--tie-band", tie_band, "Train-accuracy band treated as tied");

  std::string train_report, gen_report, verdict_out;
  CriteriaThresholds thresholds;
  auto* assess_cmd = app.add_subcommand("assess", "Verdict from a train and a generalization report");
  assess_cmd->add_option("train_report", train_report)->required();
  assess_cmd->add_option("generalization_report", gen_report)->required();
  assess_cmd->add_option("--out", verdict_out, "Verdict JSON path");
  assess_cmd->add_option("--delta-re", thresholds.delta_re, "Upper bound on delta r_e");
  assess_cmd->add_option("--delta-kh05", thresholds.delta_kh05, "Upper bound on delta K_H05");
  assess_cmd->add_option("--ct-threshold", thresholds.ct_mp, "MP/MN boundary on C_t");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, out_dir);
    if (*analyze_cmd) return cmd_analyze(ckpt, tag, analyze_flags, qs_baseline);
    if (*sweep_cmd) return cmd_sweep(run_dir, sweep_analyze, sweep_flags, jobs);
    if (*select_cmd) return cmd_select(report_file, strategy, tie_band);
    if (*assess_cmd) return cmd_assess(train_report, gen_report, verdict_out, thresholds);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid " << e.field() << ": " << e.detail() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
