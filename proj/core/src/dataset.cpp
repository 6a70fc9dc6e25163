#include "fmn/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>

#include "fmn/binary_io.hpp"
#include "fmn/config_json.hpp"
#include "fmn/errors.hpp"
#include "fmn/rng.hpp"

namespace fmn {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    if (to_string(s) == name) return s;
  }
  throw ParseError("unknown split \"" + std::string(name) + "\" (expected train, query or gallery)");
}

// ---- manifest ---------------------------------------------------------------------

std::string manifest_to_json(const DatasetManifest& manifest) {
  json::Json entries = json::Json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"image", e.image},
                       {"identity", e.identity},
                       {"camera", e.camera},
                       {"split", std::string(to_string(e.split))}});
  }
  json::Json j{{"num_identities", manifest.num_identities},
               {"image_shape", manifest.image_shape},
               {"entries", std::move(entries)}};
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(std::string_view text, const std::string& source) {
  const json::Json j = json::parse(text, source);
  try {
    json::check_object(j, "", {"num_identities", "image_shape", "entries"});
    DatasetManifest m;
    m.num_identities = json::read_required<std::size_t>(j, "num_identities", "");
    m.image_shape = json::read_required<Shape>(j, "image_shape", "");
    if (m.image_shape.size() != 3 || m.image_shape[0] != 3 || m.image_shape[1] == 0 || m.image_shape[2] == 0) {
      throw ParseError("image_shape: expected [3, height, width]");
    }
    const auto it = j.find("entries");
    if (it == j.end() || !it->is_array()) throw ParseError("entries: expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string path = "entries[" + std::to_string(i) + "]";
      const json::Json& e = (*it)[i];
      json::check_object(e, path, {"image", "identity", "camera", "split"});
      ManifestEntry entry;
      entry.image = json::read_required<std::string>(e, "image", path);
      entry.identity = json::read_required<std::uint32_t>(e, "identity", path);
      entry.camera = json::read_required<std::uint32_t>(e, "camera", path);
      try {
        entry.split = parse_split(json::read_required<std::string>(e, "split", path));
      } catch (const ParseError& err) {
        throw ParseError(path + ".split: " + err.what());
      }
      m.entries.push_back(std::move(entry));
    }
    return m;
  } catch (const ParseError& e) {
    throw ParseError(source + ": " + e.what());
  }
}

// ---- synthetic generation ---------------------------------------------------------------

void SyntheticConfig::validate() const {
  auto require = [](bool ok, const char* message) {
    if (!ok) throw ContractError(message);
  };
  require(num_identities >= 2, "dataset.num_identities must be >= 2");
  require(images_per_identity >= 2, "dataset.images_per_identity must be >= 2");
  require(num_cameras >= 2, "dataset.num_cameras must be >= 2");
  require(height >= 16 && width >= 8, "dataset.height and dataset.width must be at least 16 x 8");
  require(confusable_pairs <= num_identities / 2, "dataset.confusable_pairs must be <= num_identities / 2");
  require(num_train_identities >= 2 && num_train_identities < num_identities,
          "dataset.num_train_identities must lie in [2, num_identities)");
  require(occlusion_prob >= 0.0 && occlusion_prob <= 1.0, "dataset.occlusion_prob must lie in [0, 1]");
  require(noise_sigma >= 0.0, "dataset.noise_sigma must be >= 0");
}

SyntheticConfig SyntheticConfig::synth_reid_16(std::uint64_t seed) {
  SyntheticConfig c;
  c.seed = seed;
  return c;
}

namespace {

using Color = std::array<double, 3>;

/// Global appearance shared by both members of a confusable pair.
struct Template {
  Color shirt, pants, hair, skin, shoes, stripe;
  bool striped;
  std::size_t stripe_period;
};

/// Small identity-specific mark: where it sits and what colour it has.
struct LocalCue {
  std::size_t site;
  Color color;
};

// Fractional boxes (top, bottom, left, right) of the body parts.
struct Box {
  double top, bottom, left, right;
};
constexpr Box kHead{0.06, 0.20, 0.36, 0.64};
constexpr Box kHair{0.05, 0.10, 0.34, 0.66};
constexpr Box kTorso{0.20, 0.55, 0.22, 0.78};
constexpr Box kArmLeft{0.22, 0.50, 0.12, 0.22};
constexpr Box kArmRight{0.22, 0.50, 0.78, 0.88};
constexpr Box kLegLeft{0.55, 0.88, 0.28, 0.48};
constexpr Box kLegRight{0.55, 0.88, 0.52, 0.72};
constexpr Box kShoeLeft{0.88, 0.94, 0.26, 0.48};
constexpr Box kShoeRight{0.88, 0.94, 0.52, 0.74};

// Candidate sites of the local cue: chest left/right, handbag at the hip,
// backpack strap on the shoulder, knee patch.
constexpr std::array<Box, 5> kCueSites{{
    {0.26, 0.36, 0.28, 0.46},
    {0.26, 0.36, 0.54, 0.72},
    {0.44, 0.58, 0.08, 0.26},
    {0.20, 0.34, 0.70, 0.86},
    {0.66, 0.76, 0.52, 0.72},
}};

Color random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

Color saturated_color(Rng& rng) {
  Color c{0.1, 0.1, 0.1};
  const std::size_t main = rng.below(3);
  c[main] = rng.uniform(0.75, 1.0);
  c[(main + 1 + rng.below(2)) % 3] = rng.uniform(0.0, 0.6);
  return c;
}

Template make_template(Rng& rng) {
  Template t;
  t.shirt = random_color(rng, 0.1, 0.9);
  t.pants = random_color(rng, 0.05, 0.6);
  t.hair = random_color(rng, 0.0, 0.35);
  const double tone = rng.uniform(0.45, 0.85);
  t.skin = {tone, tone * 0.8, tone * 0.65};
  t.shoes = random_color(rng, 0.0, 0.5);
  t.stripe = random_color(rng, 0.1, 0.9);
  t.striped = rng.bernoulli(0.5);
  t.stripe_period = 3 + rng.below(4);
  return t;
}

class Canvas {
 public:
  Canvas(std::size_t h, std::size_t w, Color fill) : h_(h), w_(w), px_(h * w, fill) {}

  void fill_box(const Box& b, long dy, long dx, const Color& c) {
    paint(b, dy, dx, [&](std::size_t, std::size_t) { return c; });
  }

  template <typename F>
  void paint(const Box& b, long dy, long dx, F&& color_at) {
    const long y0 = static_cast<long>(std::lround(b.top * static_cast<double>(h_))) + dy;
    const long y1 = static_cast<long>(std::lround(b.bottom * static_cast<double>(h_))) + dy;
    const long x0 = static_cast<long>(std::lround(b.left * static_cast<double>(w_))) + dx;
    const long x1 = static_cast<long>(std::lround(b.right * static_cast<double>(w_))) + dx;
    for (long y = std::max(0L, y0); y < std::min<long>(static_cast<long>(h_), y1); ++y) {
      for (long x = std::max(0L, x0); x < std::min<long>(static_cast<long>(w_), x1); ++x) {
        px_[static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)] =
            color_at(static_cast<std::size_t>(y - y0), static_cast<std::size_t>(x - x0));
      }
    }
  }

  void fill_pixels(std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1, const Color& c) {
    for (std::size_t y = y0; y < std::min(y1, h_); ++y) {
      for (std::size_t x = x0; x < std::min(x1, w_); ++x) px_[y * w_ + x] = c;
    }
  }

  RgbImage finish(double brightness, const Color& tint, double noise_sigma, Rng& rng) const {
    RgbImage img{h_, w_, std::vector<std::uint8_t>(h_ * w_ * 3)};
    for (std::size_t i = 0; i < px_.size(); ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double v = px_[i][ch] * tint[ch] + brightness;
        if (noise_sigma > 0.0) v += rng.normal(0.0, noise_sigma);
        img.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
    return img;
  }

 private:
  std::size_t h_, w_;
  std::vector<Color> px_;
};

RgbImage render(const SyntheticConfig& config, const Template& t, const LocalCue& cue, std::size_t camera,
                const std::vector<Color>& camera_tints, Rng& rng) {
  const double gray = rng.uniform(0.35, 0.65);
  Canvas canvas(config.height, config.width, {gray, gray, gray});
  const long dy = static_cast<long>(rng.below(5)) - 2;
  const long dx = static_cast<long>(rng.below(5)) - 2;

  canvas.fill_box(kHead, dy, dx, t.skin);
  canvas.fill_box(kHair, dy, dx, t.hair);
  canvas.fill_box(kArmLeft, dy, dx, t.shirt);
  canvas.fill_box(kArmRight, dy, dx, t.shirt);
  canvas.paint(kTorso, dy, dx, [&](std::size_t y, std::size_t) {
    return t.striped && y % t.stripe_period < 2 ? t.stripe : t.shirt;
  });
  canvas.fill_box(kLegLeft, dy, dx, t.pants);
  canvas.fill_box(kLegRight, dy, dx, t.pants);
  canvas.fill_box(kShoeLeft, dy, dx, t.shoes);
  canvas.fill_box(kShoeRight, dy, dx, t.shoes);
  canvas.fill_box(kCueSites[cue.site], dy, dx, cue.color);

  if (rng.bernoulli(config.occlusion_prob)) {
    const std::size_t oh = config.height / 5 + rng.below(config.height / 6 + 1);
    const std::size_t ow = config.width * 3 / 10 + rng.below(config.width * 3 / 10 + 1);
    const std::size_t oy = rng.below(config.height - oh + 1);
    const std::size_t ox = rng.below(config.width - ow + 1);
    canvas.fill_pixels(oy, oy + oh, ox, ox + ow, random_color(rng, 0.0, 1.0));
  }

  // Cameras differ by a brightness offset spread evenly over [-0.12, 0.12]
  // and a fixed per-camera colour tint.
  const double spread = config.num_cameras > 1 ? static_cast<double>(camera) / (config.num_cameras - 1) : 0.5;
  const double brightness = -0.12 + 0.24 * spread;
  return canvas.finish(brightness, camera_tints[camera], config.noise_sigma, rng);
}

/// Number of query images per held-out identity: the first image of each
/// camera, while at least two gallery images remain.
std::size_t queries_per_identity(const SyntheticConfig& c) {
  const std::size_t limit = c.images_per_identity >= 3 ? c.images_per_identity - 2 : 1;
  return std::max<std::size_t>(1, std::min(c.num_cameras, limit));
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);

  std::vector<Color> tints(config.num_cameras);
  for (Color& c : tints) c = random_color(rng, 0.85, 1.15);

  // Pairs (0,1), (2,3), ... share a template; the rest get their own.
  const std::size_t paired = 2 * config.confusable_pairs;
  std::vector<Template> templates;
  std::vector<std::size_t> template_of(config.num_identities);
  for (std::size_t id = 0; id < config.num_identities; ++id) {
    if (id < paired && id % 2 == 1) {
      template_of[id] = template_of[id - 1];
      continue;
    }
    template_of[id] = templates.size();
    templates.push_back(make_template(rng));
  }
  std::vector<LocalCue> cues(config.num_identities);
  for (std::size_t id = 0; id < config.num_identities; ++id) {
    cues[id].site = rng.below(kCueSites.size());
    cues[id].color = saturated_color(rng);
    if (id < paired && id % 2 == 1) {
      // Guarantee the pair differs locally: another site than the partner.
      const std::size_t partner = cues[id - 1].site;
      cues[id].site = (partner + 1 + rng.below(kCueSites.size() - 1)) % kCueSites.size();
    }
  }

  SyntheticDataset out;
  out.manifest.num_identities = config.num_identities;
  out.manifest.image_shape = {3, config.height, config.width};
  const std::size_t nq = queries_per_identity(config);
  for (std::size_t id = 0; id < config.num_identities; ++id) {
    const bool train = id < config.num_train_identities;
    for (std::size_t i = 0; i < config.images_per_identity; ++i) {
      const std::size_t camera = i % config.num_cameras;
      char name[64];
      std::snprintf(name, sizeof name, "images/%04zu_%03zu.ppm", id, i);
      ManifestEntry e;
      e.image = name;
      e.identity = static_cast<std::uint32_t>(id);
      e.camera = static_cast<std::uint32_t>(camera);
      e.split = train ? Split::kTrain : (i < nq ? Split::kQuery : Split::kGallery);
      out.manifest.entries.push_back(std::move(e));
      out.images.push_back(render(config, templates[template_of[id]], cues[id], camera, tints, rng));
    }
  }
  return out;
}

std::filesystem::path write_dataset(const SyntheticDataset& dataset, const std::filesystem::path& dir) {
  if (dataset.images.size() != dataset.manifest.entries.size()) {
    throw ContractError("write_dataset: image and manifest entry counts differ");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    write_ppm(dir / dataset.manifest.entries[i].image, dataset.images[i]);
  }
  const auto manifest_path = dir / "manifest.json";
  io::write_text(manifest_path, manifest_to_json(dataset.manifest));
  return manifest_path;
}

// ---- loading ----------------------------------------------------------------------

Tensor<float> image_to_tensor(const RgbImage& image) {
  const std::size_t h = image.height, w = image.width;
  Tensor<float> t(Shape{3, h, w});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) t[ch * h * w + i] = static_cast<float>(image.pixels[i * 3 + ch]) / 255.0f;
  }
  return t;
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  LoadedDataset out;
  out.manifest_path = manifest_path;
  out.manifest = manifest_from_json(io::read_text(manifest_path), manifest_path.string());
  const auto root = manifest_path.parent_path();
  for (const auto& e : out.manifest.entries) {
    const auto path = root / e.image;
    if (!std::filesystem::exists(path)) throw IoError("missing image " + path.string());
    const RgbImage img = read_ppm(path);
    if (img.height != out.manifest.image_shape[1] || img.width != out.manifest.image_shape[2]) {
      throw DimensionError(path.string() + ": image is " + std::to_string(img.height) + "x" +
                           std::to_string(img.width) + ", manifest declares " +
                           shape_to_string(out.manifest.image_shape));
    }
    out.images.push_back(image_to_tensor(img));
  }
  return out;
}

std::vector<std::uint32_t> dense_label_map(std::span<const std::uint32_t> identities) {
  std::vector<std::uint32_t> ids(identities.begin(), identities.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<std::size_t> entries_in(const DatasetManifest& manifest, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    if (manifest.entries[i].split == split) out.push_back(i);
  }
  return out;
}

TrainingSet make_training_set(const LoadedDataset& data, std::vector<std::uint32_t>* label_map) {
  const std::vector<std::size_t> idx = entries_in(data.manifest, Split::kTrain);
  std::vector<std::uint32_t> ids;
  for (std::size_t i : idx) ids.push_back(data.manifest.entries[i].identity);
  const std::vector<std::uint32_t> map = dense_label_map(ids);
  TrainingSet set;
  set.num_classes = map.size();
  for (std::size_t i : idx) {
    set.images.push_back(data.images[i]);
    const auto pos = std::lower_bound(map.begin(), map.end(), data.manifest.entries[i].identity);
    set.labels.push_back(static_cast<std::size_t>(pos - map.begin()));
  }
  if (label_map) *label_map = map;
  return set;
}

}  // namespace fmn
