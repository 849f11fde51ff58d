#include "dtrec/cli/commands.hpp"

#include "dtrec/eval/metrics.hpp"
#include "dtrec/numerics/random.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace dtrec::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

/// Log file in the run directory, mirrored to stderr.
class RunLog {
 public:
  explicit RunLog(const fs::path& path) : out_(path, std::ios::app), start_(std::chrono::steady_clock::now()) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }

  void operator()(const std::string& message) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ostringstream line;
    line << '[' << std::fixed << std::setprecision(1) << std::setw(7) << t << "s] " << message;
    out_ << line.str() << '\n' << std::flush;
    std::cerr << line.str() << '\n';
  }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

struct RunContext {
  fs::path dir;
  std::unique_ptr<RunLog> log;
};

RunContext open_run(const RunConfig& config, const std::string& command) {
  const std::string& name = config.get("run.name");
  RunContext run;
  run.dir = make_run_dir(config.get("run.out_dir"), name.empty() ? command : name);
  write_text(run.dir / "resolved_config", config.resolved_text());
  run.log = std::make_unique<RunLog>(run.dir / "log");
  (*run.log)("command " + command + ", run directory " + run.dir.string());
  return run;
}

InteractionDataset load_data(const RunConfig& config) {
  const std::string& path = config.get("data.path");
  if (path.empty()) throw ConfigError("data.path is required");
  if (!fs::is_regular_file(path)) throw ConfigError("data file not found: " + path);
  InteractionDataset ds = load_interactions(path, config.get_int("data.min_count"));
  if (const std::string& labels = config.get("data.labels"); !labels.empty()) {
    std::ifstream in(labels);
    if (!in) throw ConfigError("label file not found: " + labels);
    attach_item_labels(ds, read_labels_tsv(in));
  }
  if (const std::string& users = config.get("data.users"); !users.empty()) {
    std::ifstream in(users);
    if (!in) throw ConfigError("user label file not found: " + users);
    attach_user_labels(ds, read_user_labels_tsv(in));
  }
  return ds;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << std::setprecision(9) << "epoch,loss,process,prototype,aggregate,valid_ndcg10,valid_cost,improved\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.loss << ',' << r.process << ',' << r.prototype << ',' << r.aggregate << ','
        << r.valid_ndcg10 << ',' << r.valid_cost << ',' << (r.improved ? 1 : 0) << '\n';
  return out.str();
}

std::string epoch_line(const EpochRecord& r) {
  std::ostringstream os;
  os << std::setprecision(5) << "epoch " << r.epoch << " loss " << r.loss << " (L0 " << r.process << ", Lp "
     << r.prototype << ", agg " << r.aggregate << ") valid N@10 " << r.valid_ndcg10 << " cost " << r.valid_cost << '%'
     << (r.improved ? " *" : "");
  return os.str();
}

const std::vector<Example>& eval_split(const RunConfig& config, const LeaveOneOutSplit& split) {
  return config.get("eval.split") == "valid" ? split.valid : split.test;
}

/// Trains one model into `dir` and evaluates it; returns the report.
MetricsReport train_and_report(const RunConfig& config, const InteractionDataset& ds, const fs::path& dir,
                               RunLog& log) {
  const LeaveOneOutSplit split = leave_one_out_split(ds);
  const ModelConfig mc = config.model();
  const TrainConfig tc = config.train();
  const int every = config.get_int("train.checkpoint_every");
  std::ostringstream intro;
  intro << "dataset: " << ds.num_users() << " users, " << ds.num_items() << " items, " << ds.num_interactions()
        << " interactions; variant " << to_string(mc.variant) << ", seed " << tc.seed;
  log(intro.str());

  Recommender<float> model(mc, ds.num_items(), tc.seed);
  Trainer trainer(model, split, tc);
  trainer.train([&](const EpochRecord& r) {
    log(epoch_line(r));
    if (every > 0 && (r.epoch + 1) % every == 0)
      save_checkpoint(dir / ("epoch-" + std::to_string(r.epoch + 1) + ".ckpt"), trainer, config.values());
  });
  log("best validation N@10 " + std::to_string(trainer.state().best_score) + " at epoch " +
      std::to_string(trainer.state().best_epoch));
  save_checkpoint(dir / "model.ckpt", trainer, config.values());
  write_text(dir / "history.csv", history_csv(trainer.state().history));

  const std::vector<Example>& examples = eval_split(config, split);
  const auto results = rank_examples(model, examples, config.eval(mc));
  const MetricsReport report =
      summarize(results, mc.backbone.reasoning_steps, to_string(mc.variant), tc.seed, config.get_int("eval.groups"));
  write_text(dir / "metrics.json", report.to_json() + "\n");
  write_exits_csv(dir / "exits.csv", results, ds);
  return report;
}

/// Configuration stored in a checkpoint, with evaluation-time keys taken from `overrides`.
RunConfig checkpoint_config(const RunConfig& overrides, const fs::path& checkpoint) {
  RunConfig config;
  for (const auto& [k, v] : read_checkpoint_config(checkpoint)) config.set(k, v);
  for (const auto& [k, v] : overrides.values()) {
    if (k.rfind("eval.", 0) == 0 || k.rfind("arh.", 0) == 0 || k == "run.out_dir" || k == "run.name")
      config.set(k, v);
  }
  return config;
}

fs::path require_checkpoint(const RunConfig& config) {
  const std::string& path = config.get("eval.checkpoint");
  if (path.empty()) throw ConfigError("eval.checkpoint is required");
  if (!fs::is_regular_file(path)) throw ConfigError("checkpoint not found: " + path);
  return path;
}

}  // namespace

fs::path make_run_dir(const fs::path& parent, const std::string& name) {
  fs::create_directories(parent);
  fs::path dir = parent / name;
  for (int suffix = 1; !fs::create_directory(dir); ++suffix) dir = parent / (name + "-" + std::to_string(suffix));
  return dir;
}

fs::path cmd_gen_data(const RunConfig& config) {
  config.validate();
  RunContext run = open_run(config, "gen-data");
  const SyntheticTaxonomy tax = config.taxonomy();
  const std::vector<Cohort> cohorts = config.cohorts();
  const SyntheticData data = generate_synthetic(tax, cohorts, config.get_u64("run.seed"));
  {
    auto out = open_out(run.dir / "interactions.tsv");
    write_interactions_tsv(out, data.interactions);
  }
  {
    auto out = open_out(run.dir / "labels.tsv");
    write_labels_tsv(out, data.items);
  }
  {
    auto out = open_out(run.dir / "users.tsv");
    write_user_labels_tsv(out, data.users);
  }
  const InteractionDataset ds = to_dataset(data, config.get_int("data.min_count"));
  const DatasetStats stats = dataset_stats(ds);
  nlohmann::ordered_json j;
  j["users"] = stats.users;
  j["items"] = stats.items;
  j["interactions"] = stats.interactions;
  j["sparsity"] = stats.sparsity;
  j["leaves"] = tax.num_leaves();
  j["categories"] = tax.num_categories();
  j["fingerprint"] = fingerprint(ds);
  write_text(run.dir / "metrics.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << std::endl;
  (*run.log)("wrote " + std::to_string(data.interactions.size()) + " interactions for " +
             std::to_string(data.users.size()) + " users");
  return run.dir;
}

fs::path cmd_train(const RunConfig& config) {
  config.validate();
  const InteractionDataset ds = load_data(config);
  RunContext run = open_run(config, "train");
  const MetricsReport report = train_and_report(config, ds, run.dir, *run.log);
  std::cout << report.to_json() << std::endl;
  return run.dir;
}

fs::path cmd_eval(const RunConfig& overrides) {
  const fs::path checkpoint = require_checkpoint(overrides);
  const RunConfig config = checkpoint_config(overrides, checkpoint);
  config.validate();
  const InteractionDataset ds = load_data(config);
  RunContext run = open_run(config, "eval");
  const ModelConfig mc = config.model();
  Recommender<float> model(mc, ds.num_items(), config.get_u64("run.seed"));
  load_parameters(checkpoint, model);
  const LeaveOneOutSplit split = leave_one_out_split(ds);
  const auto results = rank_examples(model, eval_split(config, split), config.eval(mc));
  const MetricsReport report = summarize(results, mc.backbone.reasoning_steps, to_string(mc.variant),
                                         config.get_u64("run.seed"), config.get_int("eval.groups"));
  write_text(run.dir / "metrics.json", report.to_json() + "\n");
  write_exits_csv(run.dir / "exits.csv", results, ds);
  std::cout << report.to_json() << std::endl;
  (*run.log)("evaluated " + std::to_string(results.size()) + " users from " + checkpoint.string());
  return run.dir;
}

fs::path cmd_ablate(const RunConfig& config) {
  config.validate();
  const InteractionDataset ds = load_data(config);
  RunContext run = open_run(config, "ablate");
  std::ostringstream table;
  table << "model,seed,N@10,Cons.\n";
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& variant : config.get_list("ablate.variants")) {
    for (const auto& seed : config.get_list("ablate.seeds")) {
      RunConfig cell = config;
      cell.set("model.variant", variant);
      cell.set("run.seed", seed);
      const fs::path dir = run.dir / (variant + "-seed" + seed);
      fs::create_directories(dir);
      write_text(dir / "resolved_config", cell.resolved_text());
      (*run.log)("training " + variant + " with seed " + seed);
      const MetricsReport report = train_and_report(cell, ds, dir, *run.log);
      char line[128];
      std::snprintf(line, sizeof(line), "%s,%s,%.6f,%.2f\n", variant.c_str(), seed.c_str(), report.ndcg10,
                    report.cost_ratio);
      table << line;
      rows.push_back(nlohmann::ordered_json::parse(report.to_json()));
    }
  }
  write_text(run.dir / "ablation.csv", table.str());
  write_text(run.dir / "metrics.json", rows.dump(2) + "\n");
  std::cout << table.str();
  return run.dir;
}

fs::path cmd_analyze(const RunConfig& overrides) {
  const fs::path checkpoint = require_checkpoint(overrides);
  const RunConfig config = checkpoint_config(overrides, checkpoint);
  config.validate();
  const InteractionDataset ds = load_data(config);
  RunContext run = open_run(config, "analyze");
  const ModelConfig mc = config.model();
  const std::uint64_t seed = config.get_u64("run.seed");
  Recommender<float> model(mc, ds.num_items(), seed);
  load_parameters(checkpoint, model);
  const LeaveOneOutSplit split = leave_one_out_split(ds);
  const std::vector<Example>& examples = eval_split(config, split);
  const EvalOptions options = config.eval(mc);
  const auto results = rank_examples(model, examples, options);
  const int groups = config.get_int("eval.groups");
  const MetricsReport report = summarize(results, mc.backbone.reasoning_steps, to_string(mc.variant), seed, groups);

  std::vector<const UserResult*> by_length;
  for (const auto& r : results) by_length.push_back(&r);
  std::sort(by_length.begin(), by_length.end(), [](auto* a, auto* b) {
    return a->length != b->length ? a->length < b->length : a->user < b->user;
  });
  std::ostringstream table;
  table << std::setprecision(6) << "group,users,min_length,max_length,mean_exit_step\n";
  const std::size_t n = by_length.size();
  for (int g = 0; g < groups; ++g) {
    const std::size_t lo = n * g / groups, hi = n * (g + 1) / groups;
    if (lo == hi) continue;
    table << 'G' << g + 1 << ',' << hi - lo << ',' << by_length[lo]->length << ',' << by_length[hi - 1]->length << ','
          << report.group_steps[g] << '\n';
  }
  write_text(run.dir / "length_groups.csv", table.str());

  if (!ds.user_shift_prob.empty()) {
    std::ostringstream shift;
    shift << std::setprecision(6) << "shift_prob,mean_exit_step\n";
    for (const auto& [key, steps] : steps_by_key(results, ds.user_shift_prob)) shift << key << ',' << steps << '\n';
    write_text(run.dir / "steps_by_shift.csv", shift.str());
  }

  if (mc.backbone.reasoning_steps > 0) {
    std::optional<PrototypeIndex<float>> index = load_prototypes(checkpoint);
    if (!index) {
      TrainConfig tc = config.train();
      index = refresh_index(model.encoder(), tc.schedule, false, 0, derive_seed(seed, Stream::kKMeans), tc.kmeans);
    }
    export_trajectories(run.dir / "trajectories.csv", model, examples, *index, ds, options);
  }
  write_text(run.dir / "metrics.json", report.to_json() + "\n");
  std::cout << table.str();
  (*run.log)("analyzed " + std::to_string(results.size()) + " users from " + checkpoint.string());
  return run.dir;
}

int run(int argc, char** argv) {
  CLI::App app{"Sequential recommendation with supervised latent reasoning and adaptive halting"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string variant, out_dir, name, data, checkpoint;

  struct Command {
    const char* name;
    const char* help;
    fs::path (*fn)(const RunConfig&);
  };
  const Command commands[] = {
      {"gen-data", "Generate a synthetic taxonomy dataset", cmd_gen_data},
      {"train", "Train a model and evaluate it on the test split", cmd_train},
      {"eval", "Evaluate a checkpoint", cmd_eval},
      {"ablate", "Train every variant for every seed and tabulate N@10 and cost", cmd_ablate},
      {"analyze", "Exit steps by length group and reasoning trajectories for a checkpoint", cmd_analyze},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", config_path, "INI configuration file");
    sub->add_option("--set", overrides, "Override a config value: section.key=value (repeatable)");
    sub->add_option("--seed", seed, "Shorthand for --set run.seed=N");
    sub->add_option("--out-dir", out_dir, "Shorthand for --set run.out_dir=PATH");
    sub->add_option("--name", name, "Shorthand for --set run.name=NAME");
    sub->add_option("--data", data, "Shorthand for --set data.path=PATH");
    sub->add_option("--variant", variant, "Shorthand for --set model.variant=NAME");
    sub->add_option("--checkpoint", checkpoint, "Shorthand for --set eval.checkpoint=PATH");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig config;
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& o : overrides) config.apply_override(o);
    if (seed) config.set("run.seed", std::to_string(*seed));
    if (!out_dir.empty()) config.set("run.out_dir", out_dir);
    if (!name.empty()) config.set("run.name", name);
    if (!data.empty()) config.set("data.path", data);
    if (!variant.empty()) config.set("model.variant", variant);
    if (!checkpoint.empty()) config.set("eval.checkpoint", checkpoint);
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) {
        const fs::path dir = cmd->fn(config);
        std::cerr << "run directory: " << dir.string() << '\n';
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dtrec::cli
