// rvp: synthetic FMCW radar pose experiments, from scene simulation through
// spectrogram extraction, masked pre-training, fine-tuning, leave-one-person-
// out evaluation, and cross-method statistics.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
// 1 anything else. Failures emit one JSON object on stderr.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <rvp/pipeline.hpp>

namespace {

void error_record(const char* type, const std::string& message) {
  std::cerr << nlohmann::json{{"event", "error"},
                              {"type", type},
                              {"message", message}}
                   .dump()
            << '\n';
}

nlohmann::json parse_json_or_string(const std::string& text) {
  nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::string> dataset, out, modality;
  std::optional<uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "JSON config file merged over built-in defaults");
    cmd->add_option("--dataset", dataset, "dataset directory");
    cmd->add_option("--out", out, "directory that receives run directories");
    cmd->add_option("--modality", modality, "input stream: rd, ra, or dual");
    cmd->add_option("--seed", seed, "root seed; all stage seeds derive from it");
    cmd->add_option("--set", sets,
                    "override one config field, e.g. --set finetune.epochs=30")
        ->take_all();
  }

  // defaults < config file < flags; extra overrides come from the caller
  // (subcommand-specific flags) and precede the generic --set pairs.
  nlohmann::json resolve(
      std::vector<std::pair<std::string, nlohmann::json>> overrides) const {
    std::optional<nlohmann::json> file;
    if (!config_path.empty()) file = rvp::load_config_file(config_path);
    if (dataset) overrides.push_back({"dataset_dir", *dataset});
    if (out) overrides.push_back({"out_dir", *out});
    if (modality) overrides.push_back({"modality", *modality});
    if (seed) overrides.push_back({"seed", *seed});
    for (const std::string& s : sets) {
      const size_t eq = s.find('=');
      if (eq == std::string::npos || eq == 0)
        throw rvp::config_error("config: --set expects key=value, got '" + s +
                                "'");
      overrides.push_back(
          {s.substr(0, eq), parse_json_or_string(s.substr(eq + 1))});
    }
    return rvp::resolve_config_json(file ? &*file : nullptr, overrides);
  }
};

int dispatch(CLI::App& app, const CommonFlags& common,
             const std::optional<int>& fold, const std::vector<int>& folds,
             const std::optional<std::string>& head,
             const std::optional<std::string>& init,
             const std::optional<std::string>& eval_checkpoint,
             const std::optional<std::string>& init_checkpoint,
             const std::vector<std::string>& methods) {
  std::vector<std::pair<std::string, nlohmann::json>> ov;
  if (fold) ov.push_back({"folds", nlohmann::json::array({*fold})});
  if (!folds.empty()) ov.push_back({"folds", folds});
  if (head) ov.push_back({"finetune.head", *head});
  if (init) ov.push_back({"finetune.init", *init});
  if (eval_checkpoint) ov.push_back({"checkpoint", *eval_checkpoint});
  if (init_checkpoint)
    ov.push_back({"finetune.init_checkpoint", *init_checkpoint});

  if (app.got_subcommand("report")) {
    if (methods.size() < 2)
      throw rvp::config_error("report: pass --method name=dir at least twice");
    std::vector<std::pair<std::string, std::string>> named;
    nlohmann::json listed = nlohmann::json::array();
    for (const std::string& m : methods) {
      const size_t eq = m.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == m.size())
        throw rvp::config_error("report: --method expects name=dir, got '" +
                                m + "'");
      named.push_back({m.substr(0, eq), m.substr(eq + 1)});
      listed.push_back({{"name", named.back().first},
                        {"dir", named.back().second}});
    }
    const std::string out_dir = common.out.value_or("runs");
    const uint64_t seed = common.seed.value_or(1);
    const nlohmann::json resolved = {{"subcommand", "report"},
                                     {"methods", listed},
                                     {"out_dir", out_dir},
                                     {"seed", seed}};
    std::string table;
    const auto dir = rvp::run_report(named, out_dir, resolved, seed, &table);
    std::cout << table;
    std::cout << dir.string() << '\n';
    return 0;
  }

  const nlohmann::json resolved = common.resolve(std::move(ov));
  const rvp::ExperimentConfig cfg = rvp::parse_config(resolved);

  std::filesystem::path dir;
  if (app.got_subcommand("simulate"))
    dir = rvp::run_simulate(cfg, resolved);
  else if (app.got_subcommand("process"))
    dir = rvp::run_process(cfg);
  else if (app.got_subcommand("pretrain"))
    dir = rvp::run_pretrain(cfg, resolved);
  else if (app.got_subcommand("finetune"))
    dir = rvp::run_finetune(cfg, resolved);
  else if (app.got_subcommand("evaluate"))
    dir = rvp::run_evaluate(cfg, resolved);
  else if (app.got_subcommand("lopo"))
    dir = rvp::run_lopo(cfg, resolved);
  else
    throw rvp::config_error("cli: no subcommand given");
  std::cout << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "synthetic radar pose pipeline: simulate, process, pretrain, finetune, "
      "evaluate, report, lopo"};
  app.require_subcommand(1);

  CommonFlags common;
  std::optional<int> fold;
  std::vector<int> folds;
  std::optional<std::string> head, init, eval_checkpoint, init_checkpoint;
  std::vector<std::string> methods;

  CLI::App* sim = app.add_subcommand(
      "simulate", "synthesize scenes and raw radar IQ into a dataset");
  CLI::App* proc = app.add_subcommand(
      "process", "turn raw IQ into range-Doppler and range-angle clips");
  CLI::App* pre = app.add_subcommand(
      "pretrain", "masked-reconstruction pre-training for one fold");
  CLI::App* fin = app.add_subcommand(
      "finetune", "supervised pose fine-tuning for one fold");
  CLI::App* eval = app.add_subcommand(
      "evaluate", "run a checkpoint over one fold's held-out person");
  CLI::App* rep = app.add_subcommand(
      "report", "compare fold reports across methods with paired statistics");
  CLI::App* lopo = app.add_subcommand(
      "lopo", "chain pretrain, finetune, and evaluate for every test person");

  for (CLI::App* cmd : {sim, proc, pre, fin, eval, lopo}) common.attach(cmd);
  for (CLI::App* cmd : {pre, fin, eval})
    cmd->add_option("--fold", fold, "test person held out of training")
        ->required();
  lopo->add_option("--folds", folds,
                   "subset of test persons (default: all in the manifest)")
      ->delimiter(',');
  for (CLI::App* cmd : {fin, eval, lopo}) {
    cmd->add_option("--head", head, "pose head: heatmap, mlp, or gcn");
    cmd->add_option("--init", init, "encoder init: random or pretrained");
  }
  eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint to load")
      ->required();
  for (CLI::App* cmd : {fin, lopo})
    cmd->add_option("--checkpoint", init_checkpoint,
                    "checkpoint to warm-start from (pretrained init)");
  rep->add_option("--method", methods, "method as name=fold-report-dir")
      ->required()
      ->take_all();
  rep->add_option("--out", common.out, "directory that receives the report");
  rep->add_option("--seed", common.seed, "seed recorded in the run name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    error_record("config", e.what());
    return 2;
  }

  try {
    return dispatch(app, common, fold, folds, head, init, eval_checkpoint,
                    init_checkpoint, methods);
  } catch (const rvp::config_error& e) {
    error_record("config", e.what());
    return 2;
  } catch (const rvp::data_error& e) {
    error_record("data", e.what());
    return 3;
  } catch (const rvp::dimension_error& e) {
    error_record("data", e.what());
    return 3;
  } catch (const rvp::numeric_error& e) {
    error_record("numeric", e.what());
    return 4;
  } catch (const std::exception& e) {
    error_record("internal", e.what());
    return 1;
  }
}
