#include "fmn/config_json.hpp"

#include <algorithm>

namespace fmn::json {

std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < offset; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

Json parse(std::string_view text, const std::string& source) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    // byte is 1-based and points at the offending character.
    const auto [line, column] = line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    std::string what = e.what();
    if (const auto pos = what.find("syntax error"); pos != std::string::npos) what = what.substr(pos);
    throw ParseError(source + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what);
  }
}

std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

void check_object(const Json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ParseError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ParseError(join(path, key) + ": unknown field");
    }
  }
}

// ---- network ----------------------------------------------------------------------

Json to_json(const NetworkConfig& c) {
  return Json{{"in_channels", c.in_channels},
              {"height", c.height},
              {"width", c.width},
              {"stem_channels", c.stem_channels},
              {"stem_kernel", c.stem_kernel},
              {"stem_stride", c.stem_stride},
              {"pool_window", c.pool_window},
              {"pool_stride", c.pool_stride},
              {"block_channels", c.block_channels},
              {"blocks_per_stage", c.blocks_per_stage},
              {"feature_dim", c.feature_dim},
              {"num_identities", c.num_identities},
              {"mask_tap", std::string(to_string(c.mask_tap))},
              {"alpha", c.alpha}};
}

NetworkConfig network_config_from_json(const Json& j, const std::string& path) {
  check_object(j, path,
               {"in_channels", "height", "width", "stem_channels", "stem_kernel", "stem_stride", "pool_window",
                "pool_stride", "block_channels", "blocks_per_stage", "feature_dim", "num_identities", "mask_tap",
                "alpha"});
  NetworkConfig c;
  read_optional(j, "in_channels", path, c.in_channels);
  read_optional(j, "height", path, c.height);
  read_optional(j, "width", path, c.width);
  read_optional(j, "stem_channels", path, c.stem_channels);
  read_optional(j, "stem_kernel", path, c.stem_kernel);
  read_optional(j, "stem_stride", path, c.stem_stride);
  read_optional(j, "pool_window", path, c.pool_window);
  read_optional(j, "pool_stride", path, c.pool_stride);
  read_optional(j, "block_channels", path, c.block_channels);
  read_optional(j, "blocks_per_stage", path, c.blocks_per_stage);
  read_optional(j, "feature_dim", path, c.feature_dim);
  read_optional(j, "num_identities", path, c.num_identities);
  read_optional(j, "alpha", path, c.alpha);
  std::string tap(to_string(c.mask_tap));
  read_optional(j, "mask_tap", path, tap);
  c.mask_tap = parse_mask_tap(tap);
  return c;
}

// ---- training ---------------------------------------------------------------------

Json to_json(const TrainConfig& c) {
  return Json{{"lr_initial", c.lr_initial},
              {"lr_drop_epoch", c.lr_drop_epoch},
              {"lr_drop_epoch_stage2", c.lr_drop_epoch_stage2},
              {"lr_drop_factor", c.lr_drop_factor},
              {"momentum", c.momentum},
              {"epochs_stage1", c.epochs_stage1},
              {"epochs_stage2", c.epochs_stage2},
              {"batch_size", c.batch_size},
              {"margin", c.margin},
              {"augmentation", {{"flip_prob", c.augmentation.flip_prob}, {"crop_pad", c.augmentation.crop_pad}}},
              {"stage1_target_accuracy", c.stage1_target_accuracy}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& path) {
  check_object(j, path,
               {"lr_initial", "lr_drop_epoch", "lr_drop_epoch_stage2", "lr_drop_factor", "momentum", "epochs_stage1",
                "epochs_stage2", "batch_size", "margin", "augmentation", "stage1_target_accuracy"});
  TrainConfig c;
  read_optional(j, "lr_initial", path, c.lr_initial);
  read_optional(j, "lr_drop_epoch", path, c.lr_drop_epoch);
  read_optional(j, "lr_drop_epoch_stage2", path, c.lr_drop_epoch_stage2);
  read_optional(j, "lr_drop_factor", path, c.lr_drop_factor);
  read_optional(j, "momentum", path, c.momentum);
  read_optional(j, "epochs_stage1", path, c.epochs_stage1);
  read_optional(j, "epochs_stage2", path, c.epochs_stage2);
  read_optional(j, "batch_size", path, c.batch_size);
  read_optional(j, "margin", path, c.margin);
  read_optional(j, "stage1_target_accuracy", path, c.stage1_target_accuracy);
  if (const auto it = j.find("augmentation"); it != j.end()) {
    const std::string aug = join(path, "augmentation");
    check_object(*it, aug, {"flip_prob", "crop_pad"});
    read_optional(*it, "flip_prob", aug, c.augmentation.flip_prob);
    read_optional(*it, "crop_pad", aug, c.augmentation.crop_pad);
  }
  return c;
}

// ---- retrieval --------------------------------------------------------------------

Json to_json(const ReRankConfig& c) { return Json{{"k1", c.k1}, {"k2", c.k2}, {"lambda", c.lambda}}; }

ReRankConfig rerank_config_from_json(const Json& j, const std::string& path) {
  check_object(j, path, {"k1", "k2", "lambda"});
  ReRankConfig c;
  read_optional(j, "k1", path, c.k1);
  read_optional(j, "k2", path, c.k2);
  read_optional(j, "lambda", path, c.lambda);
  return c;
}

Json to_json(const EvalProtocol& c) {
  return Json{{"exclude_same_camera_same_id", c.exclude_same_camera_same_id}, {"ranks", c.ranks_reported}};
}

EvalProtocol eval_protocol_from_json(const Json& j, const std::string& path) {
  check_object(j, path, {"exclude_same_camera_same_id", "ranks"});
  EvalProtocol c;
  read_optional(j, "exclude_same_camera_same_id", path, c.exclude_same_camera_same_id);
  read_optional(j, "ranks", path, c.ranks_reported);
  return c;
}

// ---- dataset ----------------------------------------------------------------------

Json to_json(const SyntheticConfig& c) {
  return Json{{"num_identities", c.num_identities},
              {"images_per_identity", c.images_per_identity},
              {"num_cameras", c.num_cameras},
              {"height", c.height},
              {"width", c.width},
              {"confusable_pairs", c.confusable_pairs},
              {"num_train_identities", c.num_train_identities},
              {"occlusion_prob", c.occlusion_prob},
              {"noise_sigma", c.noise_sigma}};
}

SyntheticConfig synthetic_config_from_json(const Json& j, const std::string& path) {
  check_object(j, path,
               {"num_identities", "images_per_identity", "num_cameras", "height", "width", "confusable_pairs",
                "num_train_identities", "occlusion_prob", "noise_sigma"});
  SyntheticConfig c;
  read_optional(j, "num_identities", path, c.num_identities);
  read_optional(j, "images_per_identity", path, c.images_per_identity);
  read_optional(j, "num_cameras", path, c.num_cameras);
  read_optional(j, "height", path, c.height);
  read_optional(j, "width", path, c.width);
  read_optional(j, "confusable_pairs", path, c.confusable_pairs);
  read_optional(j, "num_train_identities", path, c.num_train_identities);
  read_optional(j, "occlusion_prob", path, c.occlusion_prob);
  read_optional(j, "noise_sigma", path, c.noise_sigma);
  return c;
}

}  // namespace fmn::json
