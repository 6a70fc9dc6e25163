#include "app.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <optional>
#include <ostream>

#include "commands.hpp"
#include "fmn/errors.hpp"

namespace fmn::cli {

namespace {

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  RunConfig load() const { return load_run_config(config, overrides, seed); }
};

int exit_code_for(const std::exception_ptr& e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const NumericError& x) {
    err << "numeric error: " << x.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& x) {
    err << "I/O error: " << x.what() << "\n";
    return kExitIo;
  } catch (const Error& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature mask network person re-identification pipeline", "fmn"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions global;
  app.add_option("-c,--config", global.config, "Run configuration (JSON)");
  app.add_option("--set", global.overrides, "Override a config field: dotted.path=value (repeatable)");
  app.add_option("--seed", global.seed, "Override the run seed");

  auto* generate = app.add_subcommand("generate", "Write the synthetic dataset to paths.data_dir");

  std::string stage = "all";
  auto* train = app.add_subcommand("train", "Two-stage training; checkpoints go to paths.out_dir");
  train->add_option("--stage", stage, "1, 2 or all")->capture_default_str();

  ExtractOptions extract_opts;
  auto* extract = app.add_subcommand("extract", "Write fused (and optional per-branch) descriptor files");
  extract->add_option("--checkpoint", extract_opts.checkpoint, "Checkpoint directory (default <out_dir>/stage2)");
  extract->add_option("--manifest", extract_opts.manifest, "Dataset manifest (default <data_dir>/manifest.json)");
  extract->add_option("--split", extract_opts.split, "train, query, gallery or all")->capture_default_str();
  extract->add_option("--alpha", extract_opts.alpha, "Fusion weight (default network.alpha)");
  extract->add_option("-o,--out", extract_opts.out, "Fused descriptor file")->required();
  extract->add_option("--grn-out", extract_opts.grn_out, "Normalized global-branch descriptors");
  extract->add_option("--lan-out", extract_opts.lan_out, "Normalized local-branch descriptors");
  extract->add_option("--heatmaps", extract_opts.heatmaps, "Directory for per-image PGM heatmaps");

  EvaluateOptions eval_opts;
  bool no_exclude = false;
  std::vector<std::size_t> ranks;
  std::vector<double> rerank_values;
  bool rerank_default = false;
  auto* evaluate = app.add_subcommand("evaluate", "CMC and mAP of query descriptors against a gallery");
  evaluate->add_option("--query", eval_opts.query, "Query descriptor file")->required();
  evaluate->add_option("--gallery", eval_opts.gallery, "Gallery descriptor file")->required();
  evaluate->add_flag("--no-exclude-same-camera", no_exclude,
                     "Keep gallery entries sharing the query's identity and camera");
  evaluate->add_option("--ranks", ranks, "Reported CMC ranks, e.g. 1,5,20")->delimiter(',');
  auto* rerank_opt =
      evaluate->add_option("--rerank", rerank_values, "Re-rank with K1 K2 LAMBDA")->expected(3)->type_name("K1 K2 L");
  evaluate->add_flag("--rerank-default", rerank_default,
                     "Re-rank with the config's settings, shrunk to the gallery size")
      ->excludes(rerank_opt);
  evaluate->add_option("-o,--out", eval_opts.out, "Report JSON file");
  evaluate->add_option("--per-query", eval_opts.per_query, "Per-query AP file");
  evaluate->add_option("--ranking", eval_opts.ranking, "Ranked lists: query, gallery key, distance");

  std::optional<std::filesystem::path> ablation_out;
  auto* ablate = app.add_subcommand("ablate-mask-tap", "Retrain stage 2 for every mask tap and tabulate");
  ablate->add_option("-o,--out", ablation_out, "Table file");

  std::size_t trials = 10;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference checks of every op and network loss");
  grad->add_option("--trials", trials, "Seeded inputs per case")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*generate) {
      cmd_generate(global.load(), out);
    } else if (*train) {
      const TrainStage s = parse_train_stage(stage);
      cmd_train(global.load(), s, out);
    } else if (*extract) {
      cmd_extract(global.load(), extract_opts, out);
    } else if (*evaluate) {
      const RunConfig config = global.load();
      EvalProtocol protocol = config.eval;
      if (no_exclude) protocol.exclude_same_camera_same_id = false;
      if (!ranks.empty()) protocol.ranks_reported = ranks;
      if (!rerank_values.empty()) {
        ReRankConfig rc;
        for (double v : {rerank_values[0], rerank_values[1]}) {
          if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
            throw ContractError("--rerank: k1 and k2 must be positive integers");
          }
        }
        rc.k1 = static_cast<std::size_t>(rerank_values[0]);
        rc.k2 = static_cast<std::size_t>(rerank_values[1]);
        rc.lambda = rerank_values[2];
        eval_opts.rerank = rc;
      } else if (rerank_default) {
        eval_opts.rerank = config.rerank;
        eval_opts.clamp_rerank = true;
      }
      cmd_evaluate(protocol, eval_opts, out);
    } else if (*ablate) {
      cmd_ablate_mask_tap(global.load(), ablation_out, out, err);
    } else if (*grad) {
      const std::uint64_t seed = global.seed.value_or(0);
      return cmd_grad_check(seed, trials, out) ? kExitOk : kExitNumeric;
    }
  } catch (...) {
    return exit_code_for(std::current_exception(), err);
  }
  return kExitOk;
}

}  // namespace fmn::cli
