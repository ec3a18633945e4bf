// Command-line front end: dataset generation, the training modes,
// ledger reports, and the acceptance suite.
//
// Exit codes: 0 success, 1 acceptance-criterion failure, 2 usage, config,
// or data errors.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rebo/acceptance.hpp"
#include "rebo/config.hpp"
#include "rebo/datagen.hpp"
#include "rebo/report.hpp"
#include "rebo/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

unsigned env_threads() {
  if (const char* v = std::getenv("REBO_THREADS")) {
    const long n = std::strtol(v, nullptr, 10);
    if (n >= 1 && n <= 64) return static_cast<unsigned>(n);
  }
  return std::thread::hardware_concurrency() > 0
             ? std::thread::hardware_concurrency()
             : 1;
}

rebo::RunConfig resolve_config(const std::string& config_path,
                               const std::vector<std::string>& overrides,
                               const std::string& out_flag) {
  rebo::RunConfig cfg;
  if (!config_path.empty()) cfg = rebo::load_config(config_path);
  rebo::apply_overrides(cfg, overrides);
  if (const char* env = std::getenv("REBO_OUT_DIR")) cfg.output_dir = env;
  if (!out_flag.empty()) cfg.output_dir = out_flag;
  return cfg;
}

rebo::Dataset load_checked_dataset(const std::string& path,
                                   const rebo::RunConfig& cfg) {
  rebo::Dataset data = rebo::read_dataset(path);
  if (data.classes != cfg.classes || data.points != cfg.points) {
    throw std::invalid_argument(
        "dataset " + path + " has classes=" + std::to_string(data.classes) +
        " points=" + std::to_string(data.points) +
        " but the config expects classes=" + std::to_string(cfg.classes) +
        " points=" + std::to_string(cfg.points));
  }
  return data;
}

std::map<std::int64_t, double> read_weights_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("weights: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "sample_id,cohort,weight") {
    throw std::invalid_argument("weights: bad header in " + path);
  }
  std::map<std::int64_t, double> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id_s, cohort_s, w_s;
    if (!std::getline(row, id_s, ',') || !std::getline(row, cohort_s, ',') ||
        !std::getline(row, w_s)) {
      throw std::invalid_argument("weights: bad row '" + line + "'");
    }
    out[std::stoll(id_s)] = std::stod(w_s);
  }
  return out;
}

void write_weights_csv(const std::string& path, const rebo::Trainer& trainer) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("weights: cannot open " + path);
  os << "sample_id,cohort,weight\n";
  for (const rebo::Sample* s : trainer.unlabeled_pool()) {
    os << s->id << ',' << rebo::cohort_letter(s->cohort) << ','
       << rebo::format_double(trainer.infer_weight(*s)) << '\n';
  }
}

void write_summary(const std::string& path, const rebo::Trainer& trainer,
                   const std::string& mode, bool has_eval) {
  json summary;
  summary["mode"] = mode;
  summary["global_epochs"] = trainer.state().epoch;
  if (has_eval) summary["accuracy"] = trainer.evaluate_accuracy();
  json means;
  for (const auto& [cohort, mean] : trainer.cohort_weight_means()) {
    means[std::string(1, rebo::cohort_letter(cohort))] = mean;
  }
  summary["cohort_weight_means"] = means;
  if (!trainer.metrics().empty()) {
    summary["final_train_loss"] = trainer.metrics().back().train_loss;
    summary["final_val_loss"] = trainer.metrics().back().val_loss;
  }
  summary["counters"] = {
      {"task_steps", trainer.state().counters.task_steps},
      {"meta_steps", trainer.state().counters.meta_steps},
      {"hvp_evals", trainer.state().counters.hvp_evals},
      {"consistency_evals", trainer.state().counters.consistency_evals},
  };
  std::ofstream os(path);
  if (!os) throw std::runtime_error("summary: cannot open " + path);
  os << summary.dump(2) << '\n';
}

void write_run_outputs(const fs::path& out_dir, rebo::Trainer& trainer,
                       const std::string& mode, bool has_eval) {
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "metrics.csv");
    rebo::write_metrics_csv(os, trainer.metrics());
  }
  rebo::save_ledger_csv((out_dir / "ledger.csv").string(),
                        trainer.state().ledger);
  write_weights_csv((out_dir / "weights.csv").string(), trainer);
  rebo::save_train_state((out_dir / "state").string(), trainer.state());
  write_summary((out_dir / "summary.json").string(), trainer, mode, has_eval);
}

int cmd_generate(const std::string& config_path,
                 const std::vector<std::string>& overrides,
                 const std::string& out_path) {
  rebo::RunConfig cfg = resolve_config(config_path, overrides, "");
  rebo::DatasetSpec spec = cfg.dataset_spec();
  spec.validate();
  std::vector<rebo::Sample> samples =
      rebo::generate_dataset(spec, env_threads());
  if (!out_path.empty()) {
    if (fs::path(out_path).has_parent_path()) {
      fs::create_directories(fs::path(out_path).parent_path());
    }
    rebo::write_dataset(out_path, samples, spec.classes, spec.points);
  }
  std::size_t counts[5] = {0, 0, 0, 0, 0};
  for (const rebo::Sample& s : samples)
    counts[static_cast<int>(s.cohort)] += 1;
  std::cout << "generated " << samples.size() << " samples: L=" << counts[0]
            << " U=" << counts[1] << " W=" << counts[2] << " S=" << counts[3]
            << " O=" << counts[4];
  if (!out_path.empty()) std::cout << " -> " << out_path;
  std::cout << '\n';
  return 0;
}

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_path;
  std::string eval_path;
  std::string mode = "rebo";
  std::string out_dir;
  std::string weights_path;     // transfer
  std::string init_dir;         // finetune / continual
  std::string unseen_path;      // continual
  std::string continual_mode = "estimate-fix";
  std::string resume_dir;
  long extra_epochs = 50;
};

int cmd_train(const TrainArgs& args) {
  rebo::RunConfig cfg =
      resolve_config(args.config_path, args.overrides, args.out_dir);
  rebo::TrainConfig tc = cfg.train_config();
  if (args.mode == "baseline") {
    tc.meta_enabled = false;
    tc.frozen_weight = 1.0;
  }

  rebo::Dataset data = load_checked_dataset(args.data_path, cfg);
  std::optional<rebo::Dataset> eval_data;
  if (!args.eval_path.empty()) {
    eval_data = load_checked_dataset(args.eval_path, cfg);
  }

  if (args.mode == "continual" && !args.unseen_path.empty()) {
    rebo::Dataset unseen = load_checked_dataset(args.unseen_path, cfg);
    for (rebo::Sample& s : unseen.samples) {
      for (const rebo::Sample& existing : data.samples) {
        if (existing.id == s.id) {
          throw std::invalid_argument(
              "continual: unseen sample id " + std::to_string(s.id) +
              " collides with the base dataset");
        }
      }
      data.samples.push_back(std::move(s));
    }
  }

  const fs::path out_dir = cfg.output_dir;
  fs::create_directories(out_dir);

  rebo::Trainer trainer(tc, data,
                        eval_data.has_value() ? &*eval_data : nullptr);

  auto run_epochs = [&](long count) {
    for (long k = 0; k < count; ++k) {
      trainer.run_main(1);
      const long main_done = trainer.state().epoch - tc.warmup_epochs;
      if (tc.snapshot_interval > 0 && main_done % tc.snapshot_interval == 0) {
        std::ofstream os(out_dir /
                         ("ledger_epoch_" + std::to_string(main_done) + ".csv"));
        trainer.snapshot_ledger(os);
      }
      if (tc.checkpoint_interval > 0 &&
          main_done % tc.checkpoint_interval == 0) {
        rebo::save_train_state((out_dir / "state").string(), trainer.state());
      }
    }
  };

  if (args.mode == "baseline" || args.mode == "rebo") {
    if (!args.resume_dir.empty()) {
      trainer.restore_state(
          rebo::load_train_state(args.resume_dir, tc.beta));
      if (trainer.state().epoch < tc.warmup_epochs) {
        throw std::invalid_argument(
            "resume: checkpoint predates the end of warm-up");
      }
      run_epochs(tc.epochs - (trainer.state().epoch - tc.warmup_epochs));
    } else {
      trainer.warmup();
      run_epochs(tc.epochs);
    }
  } else if (args.mode == "transfer") {
    if (args.weights_path.empty()) {
      throw std::invalid_argument("transfer mode needs --weights");
    }
    trainer.set_fixed_weights(read_weights_csv(args.weights_path));
    trainer.warmup();
    run_epochs(tc.epochs);
  } else if (args.mode == "finetune") {
    if (args.init_dir.empty()) {
      throw std::invalid_argument("finetune mode needs --init");
    }
    trainer.restore_state(rebo::load_train_state(args.init_dir, tc.beta));
    rebo::finetune(trainer, args.extra_epochs);
  } else if (args.mode == "continual") {
    if (args.init_dir.empty()) {
      throw std::invalid_argument("continual mode needs --init");
    }
    trainer.restore_state(rebo::load_train_state(args.init_dir, tc.beta));
    rebo::ContinualMode mode;
    if (args.continual_mode == "estimate-fix") {
      mode = rebo::ContinualMode::estimate_fix;
    } else if (args.continual_mode == "fine-tune") {
      mode = rebo::ContinualMode::finetune;
    } else {
      throw std::invalid_argument(
          "continual mode must be estimate-fix or fine-tune");
    }
    rebo::continual_unseen(trainer, mode, args.extra_epochs);
  } else {
    throw std::invalid_argument("unknown mode '" + args.mode + "'");
  }

  write_run_outputs(out_dir, trainer, args.mode, eval_data.has_value());
  std::cout << "done: " << (out_dir / "summary.json").string() << '\n';
  return 0;
}

int cmd_report(const std::string& ledger_path, const std::string& out_dir) {
  rebo::WeightLedger ledger = rebo::load_ledger_csv(ledger_path, 0.5);
  auto hists = rebo::weight_histograms(ledger);
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "histogram.csv");
    rebo::write_histogram_csv(os, hists);
  }
  {
    std::ofstream os(fs::path(out_dir) / "cohort_means.csv");
    rebo::write_cohort_means_csv(os, hists);
  }
  for (const auto& [cohort, h] : hists) {
    std::cout << rebo::cohort_letter(cohort) << ": mean "
              << rebo::format_double(h.mean) << " over " << h.total
              << " samples\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set semi-supervised point-cloud training with learned "
               "per-sample weights"};
  app.require_subcommand(1);

  // generate
  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  std::string gen_config, gen_out;
  std::vector<std::string> gen_sets;
  generate->add_option("--config", gen_config, "config file");
  generate->add_option("--set", gen_sets, "override: key=value");
  generate->add_option("--out", gen_out, "output dataset path");

  // train
  auto* train = app.add_subcommand("train", "run a training mode");
  TrainArgs targs;
  train->add_option("--config", targs.config_path, "config file");
  train->add_option("--set", targs.overrides, "override: key=value");
  train->add_option("--data", targs.data_path, "training dataset")->required();
  train->add_option("--eval", targs.eval_path, "held-out labeled dataset");
  train->add_option("--mode", targs.mode,
                    "baseline | rebo | transfer | finetune | continual");
  train->add_option("--out", targs.out_dir, "output directory");
  train->add_option("--weights", targs.weights_path,
                    "fixed weights CSV (transfer)");
  train->add_option("--init", targs.init_dir,
                    "state directory to start from (finetune/continual)");
  train->add_option("--unseen", targs.unseen_path,
                    "additional dataset (continual)");
  train->add_option("--continual-mode", targs.continual_mode,
                    "estimate-fix | fine-tune");
  train->add_option("--extra-epochs", targs.extra_epochs,
                    "epochs for finetune/continual");
  train->add_option("--resume", targs.resume_dir, "resume from a state dir");

  // report
  auto* report = app.add_subcommand("report", "ledger histograms and means");
  std::string rep_ledger, rep_out = "report";
  report->add_option("--ledger", rep_ledger, "ledger CSV")->required();
  report->add_option("--out", rep_out, "output directory");

  // acceptance
  auto* acceptance = app.add_subcommand("acceptance", "run the acceptance suite");
  rebo::AcceptanceOptions aopts;
  std::string acc_out = "acceptance_out";
  acceptance->add_option("--out", acc_out, "output directory");
  acceptance->add_flag("--sabotage-uniform-weights", aopts.sabotage_uniform_weights,
                       "negative control: freeze all weights at 1");
  acceptance->add_option("--only", aopts.only,
                         "run only these criterion numbers")
      ->delimiter(',');
  acceptance->add_option("--scale-epochs", aopts.scale_epochs,
                         "override main epochs (diagnostics only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*generate) return cmd_generate(gen_config, gen_sets, gen_out);
    if (*train) return cmd_train(targs);
    if (*report) return cmd_report(rep_ledger, rep_out);
    if (*acceptance) {
      aopts.out_dir = acc_out;
      aopts.threads = env_threads();
      return rebo::run_acceptance(aopts);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
