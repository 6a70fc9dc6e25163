#include "commands.hpp"

#include <cstdio>
#include <ostream>

#include "fmn/binary_io.hpp"
#include "fmn/checkpoint.hpp"
#include "fmn/dataset.hpp"
#include "fmn/descriptor.hpp"
#include "fmn/errors.hpp"
#include "fmn/eval.hpp"
#include "fmn/gradient_suite.hpp"
#include "fmn/training.hpp"

namespace fmn::cli {

namespace {

void ensure_parent(const std::filesystem::path& file) {
  const auto parent = file.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  io::write_text(path, text);
}

/// The training split of the configured dataset, checked against the network.
TrainingSet training_split(const RunConfig& config, const LoadedDataset& data) {
  if (data.manifest.image_shape != config.network.input_shape()) {
    throw DimensionError(data.manifest_path.string() + ": images are " + shape_to_string(data.manifest.image_shape) +
                         ", the network expects " + shape_to_string(config.network.input_shape()));
  }
  TrainingSet set = make_training_set(data);
  if (set.images.empty()) throw ContractError(data.manifest_path.string() + ": no training entries");
  if (set.num_classes != config.network.num_identities) {
    throw ContractError("network.num_identities is " + std::to_string(config.network.num_identities) +
                        " but the training split holds " + std::to_string(set.num_classes) + " identities");
  }
  return set;
}

Checkpoint load_matching_checkpoint(const std::filesystem::path& dir, const NetworkConfig& expected) {
  Checkpoint ckpt = load_checkpoint(dir);
  if (!(ckpt.network == expected)) {
    throw ContractError(dir.string() + ": checkpoint architecture differs from the configured network");
  }
  return ckpt;
}

/// Runs a training stage while streaming metric lines to `out` and a log file.
template <typename Train>
void run_stage(const std::filesystem::path& log_path, std::ostream& out, Train&& train) {
  std::string log;
  train([&](const EpochMetrics& m) {
    const std::string line = format_metrics_line(m);
    log += line;
    out << line << std::flush;
  });
  write_file(log_path, log);
}

void train_first_stage(const RunConfig& config, const TrainingSet& data, std::ostream& out) {
  NetworkParams<float> params = init_params<float>(config.network, config.init_seed());
  const TrainConfig train = config.training();
  run_stage(config.metrics_path(1), out,
            [&](const EpochCallback& cb) { train_stage1(data, params, config.network, train, cb); });
  save_checkpoint(config.checkpoint_dir(1), config.network, params, 1);
  out << "wrote " << config.checkpoint_dir(1).string() << "\n";
}

void train_second_stage(const RunConfig& config, const TrainingSet& data, std::ostream& out) {
  const auto stage1 = config.checkpoint_dir(1);
  if (!std::filesystem::exists(stage1 / "manifest.json")) {
    throw IoError("stage 2 needs a stage-1 checkpoint; none found at " + stage1.string() +
                  " (run `train --stage 1` first)");
  }
  Checkpoint ckpt = load_matching_checkpoint(stage1, config.network);
  if (ckpt.stage < 1) throw ContractError(stage1.string() + ": checkpoint has not completed stage 1");
  const TrainConfig train = config.training();
  run_stage(config.metrics_path(2), out,
            [&](const EpochCallback& cb) { train_stage2(data, ckpt.params, config.network, train, cb); });
  save_checkpoint(config.checkpoint_dir(2), config.network, ckpt.params, 2);
  out << "wrote " << config.checkpoint_dir(2).string() << "\n";
}

std::vector<double> widen(const std::vector<float>& v) { return {v.begin(), v.end()}; }

std::vector<float> narrow(const std::vector<double>& v) { return {v.begin(), v.end()}; }

std::vector<std::size_t> select_entries(const DatasetManifest& manifest, const std::string& split) {
  if (split == "all") {
    std::vector<std::size_t> all(manifest.entries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  return entries_in(manifest, parse_split(split));
}

/// Fused descriptors of the query and gallery entries of a loaded dataset.
std::pair<GalleryIndex, GalleryIndex> query_gallery_index(const LoadedDataset& data, NetworkParams<float>& params,
                                                         const NetworkConfig& net) {
  const Embeddings emb = extract_embeddings(data.images, params, net);
  GalleryIndex queries, gallery;
  for (std::size_t i = 0; i < data.manifest.entries.size(); ++i) {
    const ManifestEntry& e = data.manifest.entries[i];
    if (e.split == Split::kTrain) continue;
    Descriptor d = build_descriptor(widen(emb.global[i]), widen(emb.local[i]), net.alpha);
    // Round through float so that in-process results match descriptor files.
    std::vector<double> values = widen(narrow(d.values));
    (e.split == Split::kQuery ? queries : gallery).add(e.image, e.identity, e.camera, std::move(values));
  }
  return {std::move(queries), std::move(gallery)};
}

std::string heatmap_stem(const std::string& image) {
  std::string stem = std::filesystem::path(image).stem().string();
  return stem.empty() ? "image" : stem;
}

}  // namespace

TrainStage parse_train_stage(const std::string& text) {
  if (text == "1") return TrainStage::kOne;
  if (text == "2") return TrainStage::kTwo;
  if (text == "all") return TrainStage::kAll;
  throw ContractError("--stage must be 1, 2 or all (got \"" + text + "\")");
}

void cmd_generate(const RunConfig& config, std::ostream& out) {
  const SyntheticDataset ds = generate_synthetic(config.synthetic());
  const auto manifest = write_dataset(ds, config.paths.data_dir);
  out << "wrote " << ds.manifest.entries.size() << " images and " << manifest.string() << "\n";
}

void cmd_train(const RunConfig& config, TrainStage stage, std::ostream& out) {
  const LoadedDataset data = load_dataset(config.manifest_path());
  const TrainingSet set = training_split(config, data);
  if (stage != TrainStage::kTwo) train_first_stage(config, set, out);
  if (stage != TrainStage::kOne) train_second_stage(config, set, out);
}

void cmd_extract(const RunConfig& config, const ExtractOptions& options, std::ostream& out) {
  const double alpha = options.alpha.value_or(config.network.alpha);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("--alpha must lie in [0, 1]");
  if (options.out.empty()) throw ContractError("--out is required");

  const auto ckpt_dir = options.checkpoint.value_or(config.checkpoint_dir(2));
  Checkpoint ckpt = load_checkpoint(ckpt_dir);
  const LoadedDataset data = load_dataset(options.manifest.value_or(config.manifest_path()));
  if (data.manifest.image_shape != ckpt.network.input_shape()) {
    throw DimensionError("checkpoint " + ckpt_dir.string() + " expects images of shape " +
                         shape_to_string(ckpt.network.input_shape()) + ", manifest " + data.manifest_path.string() +
                         " holds " + shape_to_string(data.manifest.image_shape));
  }
  const std::vector<std::size_t> chosen = select_entries(data.manifest, options.split);

  std::vector<Tensor<float>> images;
  images.reserve(chosen.size());
  for (std::size_t i : chosen) images.push_back(data.images[i]);
  const Embeddings emb = extract_embeddings(images, ckpt.params, ckpt.network);

  std::vector<DescriptorRecord> fused, grn, lan;
  for (std::size_t n = 0; n < chosen.size(); ++n) {
    const ManifestEntry& e = data.manifest.entries[chosen[n]];
    const std::vector<double> g = widen(emb.global[n]);
    const std::vector<double> l = widen(emb.local[n]);
    fused.push_back({e.image, e.identity, e.camera, narrow(build_descriptor(g, l, alpha).values)});
    if (options.grn_out) grn.push_back({e.image, e.identity, e.camera, narrow(l2_normalize(g))});
    if (options.lan_out) lan.push_back({e.image, e.identity, e.camera, narrow(l2_normalize(l))});
  }
  ensure_parent(options.out);
  write_descriptors(options.out, fused);
  out << "wrote " << fused.size() << " descriptors to " << options.out.string() << "\n";
  if (options.grn_out) {
    ensure_parent(*options.grn_out);
    write_descriptors(*options.grn_out, grn);
  }
  if (options.lan_out) {
    ensure_parent(*options.lan_out);
    write_descriptors(*options.lan_out, lan);
  }

  if (options.heatmaps) {
    std::error_code ec;
    std::filesystem::create_directories(*options.heatmaps, ec);
    if (ec) throw IoError("cannot create " + options.heatmaps->string() + ": " + ec.message());
    const std::size_t h = ckpt.network.height, w = ckpt.network.width;
    for (std::size_t n = 0; n < chosen.size(); ++n) {
      const BranchOutputs<float> o = fmn_forward(images[n], ckpt.params, ckpt.network, Mode::kEval);
      const std::string stem = heatmap_stem(data.manifest.entries[chosen[n]].image);
      write_pgm(*options.heatmaps / (stem + "_grn.pgm"), export_heatmap(o.grn_map, h, w));
      write_pgm(*options.heatmaps / (stem + "_lan.pgm"), export_heatmap(o.lan_map, h, w));
    }
    out << "wrote " << 2 * chosen.size() << " heatmaps to " << options.heatmaps->string() << "\n";
  }
}

void cmd_evaluate(const EvalProtocol& protocol, const EvaluateOptions& options, std::ostream& out) {
  protocol.validate();
  const GalleryIndex queries = make_index(read_descriptors(options.query));
  const GalleryIndex gallery = make_index(read_descriptors(options.gallery));
  if (queries.empty()) throw ContractError(options.query.string() + ": no query descriptors");
  if (gallery.empty()) throw ContractError(options.gallery.string() + ": no gallery descriptors");
  if (queries.dim() != gallery.dim()) {
    throw DimensionError("query descriptors have dimension " + std::to_string(queries.dim()) +
                         ", gallery descriptors " + std::to_string(gallery.dim()));
  }

  std::optional<ReRankConfig> rerank = options.rerank;
  if (rerank && options.clamp_rerank) *rerank = rerank->clamped(gallery.size());
  const EvalReport report = evaluate(queries, gallery, protocol, rerank);
  const std::string json = report_to_json(report);
  out << json;
  if (options.out) write_file(*options.out, json);
  if (options.per_query) write_file(*options.per_query, per_query_ap_tsv(report));
  if (options.ranking) {
    const auto ranked = rank_queries(queries, gallery, rerank);
    write_file(*options.ranking, format_ranking(queries.keys(), ranked));
  }
}

std::vector<AblationRow> run_mask_tap_ablation(const RunConfig& config, std::ostream& log) {
  const auto stage1 = config.checkpoint_dir(1);
  if (!std::filesystem::exists(stage1 / "manifest.json")) {
    throw IoError("the ablation needs a stage-1 checkpoint; none found at " + stage1.string());
  }
  const Checkpoint ckpt = load_matching_checkpoint(stage1, config.network);
  const LoadedDataset data = load_dataset(config.manifest_path());
  const TrainingSet set = training_split(config, data);
  const TrainConfig train = config.training();
  EvalProtocol protocol = config.eval;
  if (protocol.ranks_reported.empty() || protocol.ranks_reported.front() != 1) {
    protocol.ranks_reported.insert(protocol.ranks_reported.begin(), 1);
  }

  std::vector<AblationRow> rows;
  for (MaskTap tap : kAllMaskTaps) {
    NetworkConfig net = config.network;
    net.mask_tap = tap;
    // Same draws as a fresh run with this tap, then the trained global branch.
    NetworkParams<float> params = init_params<float>(net, config.init_seed());
    params.grn = ckpt.params.grn;
    train_stage2(set, params, net, train, [&](const EpochMetrics& m) {
      log << to_string(tap) << "\t" << format_metrics_line(m) << std::flush;
    });
    auto [queries, gallery] = query_gallery_index(data, params, net);
    const EvalReport report = evaluate(queries, gallery, protocol);
    rows.push_back({tap, tap_geometry(net, tap), report.cmc.at(1), report.map_score});
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::string text = "tap\tmask_size\trank1\tmAP\n";
  char line[128];
  for (const AblationRow& r : rows) {
    std::snprintf(line, sizeof line, "%s\t%zux%zu\t%.2f\t%.2f\n", std::string(to_string(r.tap)).c_str(),
                  r.mask.height, r.mask.width, 100.0 * r.rank1, 100.0 * r.map_score);
    text += line;
  }
  return text;
}

void cmd_ablate_mask_tap(const RunConfig& config, const std::optional<std::filesystem::path>& out_path,
                         std::ostream& out, std::ostream& log) {
  const std::vector<AblationRow> rows = run_mask_tap_ablation(config, log);
  const std::string table = format_ablation(rows);
  out << table;
  if (out_path) write_file(*out_path, table);
}

bool cmd_grad_check(std::uint64_t seed, std::size_t trials, std::ostream& out) {
  if (trials == 0) throw ContractError("--trials must be positive");
  GradientSuiteOptions options;
  options.seed = seed;
  options.trials = trials;
  bool ok = true;
  char line[256];
  for (const GradientCaseResult& r : run_gradient_suite(options)) {
    std::snprintf(line, sizeof line, "%-36s %-6s max_rel_err %.3e (< %.0e)  skipped %zu/%zu  %s\n", r.name.c_str(),
                  r.precision.c_str(), r.max_error, r.threshold, r.skipped, r.probes, r.passed() ? "PASS" : "FAIL");
    out << line;
    ok = ok && r.passed();
  }
  out << (ok ? "all gradient checks passed\n" : "gradient checks FAILED\n");
  return ok;
}

}  // namespace fmn::cli
