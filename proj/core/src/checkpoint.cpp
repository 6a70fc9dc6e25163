#include "fmn/checkpoint.hpp"

#include <map>

#include "fmn/binary_io.hpp"
#include "fmn/config_json.hpp"

namespace fmn {

namespace {

constexpr const char* kFormat = "fmn-checkpoint";
constexpr int kVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const NetworkConfig& network, const NetworkParams<float>& params,
                     int stage) {
  network.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json::Json tensors = json::Json::array();
  visit_tensors(params, [&](const std::string& name, const Tensor<float>& t, ParamGroup, bool) {
    const std::string file = name + ".fmnt";
    write_tensor(dir / file, t);
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  });
  json::Json manifest{{"format", kFormat},
                      {"version", kVersion},
                      {"stage", stage},
                      {"network", json::to_json(network)},
                      {"tensors", std::move(tensors)}};
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("no checkpoint manifest at " + manifest_path.string());
  const json::Json j = json::parse(io::read_text(manifest_path), manifest_path.string());

  Checkpoint ckpt;
  std::map<std::string, std::pair<std::string, Shape>> listed;
  try {
    json::check_object(j, "", {"format", "version", "stage", "network", "tensors"});
    if (json::read_required<std::string>(j, "format", "") != kFormat) throw ParseError("format: not a checkpoint");
    if (json::read_required<int>(j, "version", "") != kVersion) throw ParseError("version: unsupported");
    ckpt.stage = json::read_required<int>(j, "stage", "");
    ckpt.network = json::network_config_from_json(j.at("network"));
    const auto& tensors = j.at("tensors");
    if (!tensors.is_array()) throw ParseError("tensors: expected an array");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const std::string path = "tensors[" + std::to_string(i) + "]";
      json::check_object(tensors[i], path, {"name", "file", "shape"});
      listed[json::read_required<std::string>(tensors[i], "name", path)] = {
          json::read_required<std::string>(tensors[i], "file", path),
          json::read_required<Shape>(tensors[i], "shape", path)};
    }
  } catch (const ParseError& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  ckpt.network.validate();

  // The architecture fixes names, shapes, strides and paddings; the files
  // supply the values.
  ckpt.params = init_params<float>(ckpt.network, 0);
  std::size_t used = 0;
  visit_tensors(ckpt.params, [&](const std::string& name, Tensor<float>& t, ParamGroup, bool) {
    const auto it = listed.find(name);
    if (it == listed.end()) throw ParseError(manifest_path.string() + ": tensor " + name + " is missing");
    const auto& [file, shape] = it->second;
    if (shape != t.shape()) {
      throw DimensionError("checkpoint tensor " + name + " has shape " + shape_to_string(shape) +
                           ", the configured network expects " + shape_to_string(t.shape()));
    }
    Tensor<float> loaded = read_tensor(dir / file);
    if (loaded.shape() != shape) {
      throw DimensionError((dir / file).string() + ": stored shape " + shape_to_string(loaded.shape()) +
                           " differs from the manifest");
    }
    t = std::move(loaded);
    ++used;
  });
  if (used != listed.size()) throw ParseError(manifest_path.string() + ": manifest lists unknown tensors");
  return ckpt;
}

}  // namespace fmn
