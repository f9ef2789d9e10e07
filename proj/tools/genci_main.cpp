#include "genci/config.hpp"
#include "genci/harness.hpp"
#include "genci/io.hpp"
#include "genci/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace genci;
using nlohmann::json;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--set", o.sets, "dotted override, e.g. model.layers=3")->take_all();
}

ExperimentConfig make_config(const CommonOpts& o) {
  if (!o.config_path.empty()) return load_config(o.config_path, o.sets);
  json j = config_to_json(ExperimentConfig{});
  for (const auto& kv : o.sets) apply_override(j, kv);
  ExperimentConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

// Artifacts shared by the read-only subcommands.
struct LoadedRun {
  ExperimentConfig cfg;
  PreparedData data;
  TokenizerArtifacts tok;
  ad::ParamStore ps;
  JointModel model;

  explicit LoadedRun(ExperimentConfig c)
      : cfg(std::move(c)), data(prepare_data(cfg)), tok(fit_tokenizer(cfg, data)) {
    model = build_joint_model(ps, cfg, data.split);
    load_params(run_paths(cfg.run_dir).model_ckpt, ps);
  }
};

const std::vector<LabeledInstance>& pick_split(const PreparedData& data,
                                               const std::string& name) {
  if (name == "train") return data.split.train;
  if (name == "valid") return data.split.valid;
  if (name == "test") return data.split.test;
  throw ConfigError("unknown split '" + name + "', expected train, valid or test");
}

void print_group(const GroupMetrics& g) {
  std::cout << "  " << g.name << ": n=" << g.count;
  if (g.auc) {
    std::cout << " auc=" << io::format_real(*g.auc);
  } else {
    std::cout << " auc=undefined";
  }
  if (g.logloss) std::cout << " logloss=" << io::format_real(*g.logloss);
  std::cout << "\n";
}

int cmd_synth(const std::string& out_dir, const SynthConfig& sc) {
  const auto paths = write_synthetic_dataset(out_dir, sc);
  std::cout << "wrote " << paths.ratings << "\n      " << paths.genres << "\n      "
            << paths.embeddings << "\n";
  return 0;
}

int cmd_tokenize(const CommonOpts& o) {
  const ExperimentConfig cfg = make_config(o);
  const RunPaths paths = run_paths(cfg.run_dir);
  std::filesystem::create_directories(cfg.run_dir);
  io::write_text_file(paths.config_snapshot, config_to_json(cfg).dump(2) + "\n");
  const PreparedData data = prepare_data(cfg);
  const TokenizerArtifacts tok = fit_tokenizer(cfg, data);
  write_semantic_ids(paths.semantic_ids, tok.table);
  std::cout << "items: " << tok.table.by_item.size()
            << "\nreconstruction_mse: " << io::format_real(tok.reconstruction_mse)
            << "\nids: " << paths.semantic_ids << "\n";
  return 0;
}

int cmd_pretrain(const CommonOpts& o) {
  const ExperimentConfig cfg = make_config(o);
  const RunPaths paths = run_paths(cfg.run_dir);
  std::filesystem::create_directories(cfg.run_dir);
  io::write_text_file(paths.config_snapshot, config_to_json(cfg).dump(2) + "\n");
  const PreparedData data = prepare_data(cfg);
  const Baseline base = pretrain_baseline(cfg, data);
  save_params(paths.baseline_ckpt, base.ps);
  std::cout << "epochs: " << base.epochs_run << "\nvalid_auc: "
            << (base.valid_auc ? io::format_real(*base.valid_auc) : "undefined")
            << "\ncheckpoint: " << paths.baseline_ckpt << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o) {
  const ExperimentConfig cfg = make_config(o);
  const ExperimentResult res = run_experiment(cfg);
  std::cout << "steps: " << res.train.steps << "\nbest_valid_auc: "
            << (res.train.best_valid_auc ? io::format_real(*res.train.best_valid_auc)
                                         : "undefined")
            << "\n";
  print_group(res.test_eval.overall);
  if (res.baseline_test.auc) {
    std::cout << "baseline test auc: " << io::format_real(*res.baseline_test.auc) << "\n";
  }
  std::cout << "metrics: " << res.paths.metrics << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& split) {
  const LoadedRun run{make_config(o)};
  const auto& ins = pick_split(run.data, split);

  VolatilityPartition vp;
  const VolatilityPartition* part = nullptr;
  if (!run.data.genres.empty()) {
    std::vector<LabeledInstance> all = run.data.split.train;
    all.insert(all.end(), run.data.split.valid.begin(), run.data.split.valid.end());
    all.insert(all.end(), run.data.split.test.begin(), run.data.split.test.end());
    vp = volatility_partition(all, run.data.genres);
    part = &vp;
  }
  const EvalResult r = evaluate_split(run.cfg, run.model, run.ps, run.tok, ins, part);
  const json j = eval_to_json(r);
  const std::string out =
      (std::filesystem::path(run.cfg.run_dir) / ("eval_" + split + ".json")).string();
  io::write_text_file(out, j.dump(2) + "\n");
  print_group(r.overall);
  for (const auto& g : r.groups) print_group(g);
  std::cout << "written: " << out << "\n";
  return 0;
}

int cmd_ablate(const CommonOpts& o, std::vector<std::string> variants) {
  const ExperimentConfig base = make_config(o);
  if (variants.empty()) {
    variants = {"full",   "no_st",       "no_lt",        "no_sr",
                "no_ntp", "intent_mean", "target_intent"};
  }
  std::ostringstream csv;
  csv << "variant,auc,logloss\n";
  std::cout << "variant            auc        logloss\n";
  for (const auto& v : variants) {
    const ExperimentResult r = run_ablation(base, v);
    const auto& m = r.test_eval.overall;
    csv << v << ',' << (m.auc ? io::format_real(*m.auc) : "") << ','
        << (m.logloss ? io::format_real(*m.logloss) : "") << "\n";
    std::cout << v << std::string(v.size() < 19 ? 19 - v.size() : 1, ' ')
              << (m.auc ? io::format_real(*m.auc) : "undefined") << "  "
              << (m.logloss ? io::format_real(*m.logloss) : "undefined") << "\n";
  }
  std::filesystem::create_directories(base.run_dir);
  const std::string out = (std::filesystem::path(base.run_dir) / "ablation.csv").string();
  io::write_text_file(out, csv.str());
  std::cout << "written: " << out << "\n";
  return 0;
}

int cmd_sweep(const CommonOpts& o, const std::string& param, std::vector<double> grid) {
  const ExperimentConfig base = make_config(o);
  if (grid.empty()) {
    if (param == "layers") {
      grid = {1, 2, 3, 4, 5};
    } else if (param == "mu") {
      grid = {0.01, 0.1, 1.0, 2.0, 5.0};
    } else {
      grid = {0.1, 0.5, 1.0, 2.0, 5.0};
    }
  }
  const auto rows = run_sweep(base, param, std::vector<Real>(grid.begin(), grid.end()));
  const std::string csv = sweep_csv(param, rows);
  std::filesystem::create_directories(base.run_dir);
  const std::string out = (std::filesystem::path(base.run_dir) / "sweep.csv").string();
  io::write_text_file(out, csv);
  std::cout << csv << "written: " << out << "\n";
  return 0;
}

int cmd_export(const CommonOpts& o, const std::string& split, std::string out) {
  const LoadedRun run{make_config(o)};
  const auto& ins = pick_split(run.data, split);
  if (out.empty()) {
    out = (std::filesystem::path(run.cfg.run_dir) / ("intents_" + split + ".tsv")).string();
  }
  const std::size_t n = export_intents(run.cfg, run.model, run.ps, run.tok, ins, out);
  std::cout << "rows: " << n << "\nwritten: " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GenCI: generative intent modeling for CTR prediction"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string split = "test";
  std::string export_out;
  std::string sweep_param;
  std::vector<double> sweep_grid;
  std::vector<std::string> variants;

  std::string synth_dir;
  SynthConfig sc;
  auto* synth = app.add_subcommand("synth", "write a synthetic movielens-format dataset");
  synth->add_option("--out", synth_dir, "output directory")->required();
  synth->add_option("--users", sc.users, "user count");
  synth->add_option("--items", sc.items, "item count");
  synth->add_option("--clusters", sc.clusters, "latent item clusters");
  synth->add_option("--groups", sc.groups, "user groups; each group hops clusters at its own stride");
  synth->add_option("--follow-prob", sc.follow_prob, "chance an event follows the cluster chain");
  synth->add_option("--popular-prob", sc.popular_prob, "chance of a popularity-driven event");
  synth->add_option("--min-events", sc.min_events, "events per user, lower bound");
  synth->add_option("--max-events", sc.max_events, "events per user, upper bound");
  synth->add_option("--embedding-dim", sc.embedding_dim, "item embedding width");
  synth->add_option("--seed", sc.seed, "generator seed");

  auto* tokenize = app.add_subcommand("tokenize", "train the id tokenizer and write ids");
  add_common(tokenize, opts);
  auto* pretrain = app.add_subcommand("pretrain-baseline", "train and freeze the baseline");
  add_common(pretrain, opts);
  auto* train = app.add_subcommand("train", "run the full pipeline into the run directory");
  add_common(train, opts);
  auto* eval = app.add_subcommand("eval", "evaluate the trained checkpoint on a split");
  add_common(eval, opts);
  eval->add_option("--split", split, "train, valid or test");
  auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
  add_common(ablate, opts);
  ablate->add_option("--variant", variants, "variant name, repeatable; all when omitted")
      ->take_all();
  auto* sweep = app.add_subcommand("sweep", "grid sweep over layers, mu or eta");
  add_common(sweep, opts);
  sweep->add_option("--param", sweep_param, "layers, mu or eta")->required();
  sweep->add_option("--grid", sweep_grid, "grid values; paper grid when omitted")->take_all();
  auto* exp = app.add_subcommand("export-intents", "dump per-instance intent vectors");
  add_common(exp, opts);
  exp->add_option("--split", split, "train, valid or test");
  exp->add_option("--out", export_out, "output path, defaults into the run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // bad invocation counts as a validation error
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_dir, sc);
    if (tokenize->parsed()) return cmd_tokenize(opts);
    if (pretrain->parsed()) return cmd_pretrain(opts);
    if (train->parsed()) return cmd_train(opts);
    if (eval->parsed()) return cmd_eval(opts, split);
    if (ablate->parsed()) return cmd_ablate(opts, variants);
    if (sweep->parsed()) return cmd_sweep(opts, sweep_param, sweep_grid);
    if (exp->parsed()) return cmd_export(opts, split, export_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
