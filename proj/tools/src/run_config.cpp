#include "run_config.hpp"

#include <limits>

#include "fmn/binary_io.hpp"
#include "fmn/errors.hpp"

namespace fmn::cli {

void RunConfig::validate() const {
  dataset.validate();
  network.validate();
  train.validate();
  eval.validate();
  // The gallery size is only known at evaluation time; check the rest now.
  rerank.validate(std::numeric_limits<std::size_t>::max());
  if (paths.data_dir.empty()) throw ContractError("paths.data_dir must not be empty");
  if (paths.out_dir.empty()) throw ContractError("paths.out_dir must not be empty");
}

SyntheticConfig RunConfig::synthetic() const {
  SyntheticConfig c = dataset;
  c.seed = dataset_seed();
  return c;
}

TrainConfig RunConfig::training() const {
  TrainConfig c = train;
  c.seed = train_seed();
  return c;
}

json::Json to_json(const RunConfig& c) {
  return json::Json{{"seed", c.seed},
                    {"paths", {{"data_dir", c.paths.data_dir.string()}, {"out_dir", c.paths.out_dir.string()}}},
                    {"dataset", json::to_json(c.dataset)},
                    {"network", json::to_json(c.network)},
                    {"train", json::to_json(c.train)},
                    {"rerank", json::to_json(c.rerank)},
                    {"eval", json::to_json(c.eval)}};
}

RunConfig run_config_from_json(const json::Json& j) {
  json::check_object(j, "", {"seed", "paths", "dataset", "network", "train", "rerank", "eval"});
  RunConfig c;
  json::read_optional(j, "seed", "", c.seed);
  if (const auto it = j.find("paths"); it != j.end()) {
    json::check_object(*it, "paths", {"data_dir", "out_dir"});
    std::string data_dir = c.paths.data_dir.string(), out_dir = c.paths.out_dir.string();
    json::read_optional(*it, "data_dir", "paths", data_dir);
    json::read_optional(*it, "out_dir", "paths", out_dir);
    c.paths = {data_dir, out_dir};
  }
  if (const auto it = j.find("dataset"); it != j.end()) c.dataset = json::synthetic_config_from_json(*it);
  if (const auto it = j.find("network"); it != j.end()) c.network = json::network_config_from_json(*it);
  if (const auto it = j.find("train"); it != j.end()) c.train = json::train_config_from_json(*it);
  if (const auto it = j.find("rerank"); it != j.end()) c.rerank = json::rerank_config_from_json(*it);
  if (const auto it = j.find("eval"); it != j.end()) c.eval = json::eval_protocol_from_json(*it);
  return c;
}

void apply_override(json::Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ParseError("--set " + assignment + ": expected dotted.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  json::Json value = json::Json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  json::Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ParseError("--set " + assignment + ": empty path component");
    if (!node->is_object()) throw ParseError("--set " + path + ": " + key + " is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::Json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
  json::Json doc = json::Json::object();
  std::string source = "defaults";
  if (path) {
    source = path->string();
    doc = json::parse(io::read_text(*path), source);
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;

  RunConfig c;
  try {
    c = run_config_from_json(doc);
  } catch (const ParseError& e) {
    throw ParseError(source + ": " + e.what());
  }
  c.validate();
  return c;
}

}  // namespace fmn::cli
