#include "hesd/analysis.hpp"

#include "hesd/objective.hpp"

namespace hesd {

CheckpointAnalysis analyze_checkpoint(const RunConfig& config, const Checkpoint& checkpoint,
                                      DatasetTag tag, const AnalysisConfig& analysis,
                                      std::optional<double> qs_baseline) {
  analysis.validate();
  const Model model(config.model);
  require_same_layout(model.layout(), checkpoint.params.layout());
  const SyntheticDataset data = make_dataset(config.dataset_config());
  const ClassifierObjective objective(model, checkpoint.buffers, data.split(tag), Mode::eval);
  HvpOperator hvp(objective, checkpoint.params);

  CheckpointAnalysis out;
  out.slq = slq_density(hvp.as_operator(), hvp.dim(), analysis.slq);

  AnalysisRecord& r = out.record;
  r.report = build_report(checkpoint_id(checkpoint.run_id, checkpoint.epoch), tag, out.slq,
                          analysis.qs(qs_baseline), analysis.thresholds);
  r.epoch = checkpoint.epoch;
  r.train_accuracy = checkpoint.train_accuracy;
  r.generalization_accuracy = checkpoint.generalization_accuracy;
  r.run_id = checkpoint.run_id;
  r.seed = checkpoint.seed;
  r.config_hash = config_hash(config);
  r.slq = analysis.slq;
  r.sigma = out.slq.density.sigma;
  r.degenerate = out.slq.density.degenerate;
  return out;
}

std::string metrics_csv(const TrainResult& r, const RunConfig& c) {
  std::string out = "# hesd training metrics\n# run_id=" + c.run_id +
                    "\n# seed=" + std::to_string(c.seed) + "\n# config_hash=" + config_hash(c) + "\n";
  out += "epoch,train_loss,train_accuracy,generalization_accuracy,grad_norm\n";
  for (const auto& m : r.metrics)
    out += std::to_string(m.epoch) + "," + format_double(m.train_loss) + "," +
           format_double(m.train_accuracy) + "," + format_double(m.generalization_accuracy) + "," +
           format_double(m.grad_norm) + "\n";
  return out;
}

TrainResult train_to_directory(const RunConfig& config, const std::filesystem::path& dir) {
  config.validate();
  std::filesystem::create_directories(dir);
  auto built = build_model(config.model, config.seed);
  const SyntheticDataset data = make_dataset(config.dataset_config());
  TrainResult r = train(built.model, built.params, built.buffers, data, config.optimizer,
                        config.train_config(), config.run_id);
  write_file_atomic(dir / "config.json", to_json(config).dump(2) + "\n");
  for (const auto& c : r.checkpoints) save_checkpoint(dir / (epoch_stem(c.epoch) + ".ckpt"), config, c);
  write_file_atomic(dir / "metrics.csv", metrics_csv(r, config));
  return r;
}

}  // namespace hesd
