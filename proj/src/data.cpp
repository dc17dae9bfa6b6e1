#include "stagedepth/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

#include "stagedepth/errors.hpp"
#include "stagedepth/serialization.hpp"

namespace stagedepth {

std::string class_name(int category) {
  switch (category) {
    case 0: return "circle";
    case 1: return "square";
    case 2: return "triangle";
    default: return "unknown";
  }
}

std::string to_string(SizeTier tier) {
  switch (tier) {
    case SizeTier::Small: return "small";
    case SizeTier::Medium: return "medium";
    default: return "large";
  }
}

SizeTier size_tier(double box_area_px, int image_side) {
  const double small = kSmallSide * image_side;
  const double medium = kMediumSide * image_side;
  if (box_area_px < small * small) return SizeTier::Small;
  if (box_area_px < medium * medium) return SizeTier::Medium;
  return SizeTier::Large;
}

namespace {

struct Rgb {
  double r, g, b;
  double luma() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
};

struct Geometry {
  ShapeClass shape;
  double x1, y1, x2, y2;  // pixel box

  bool contains(double x, double y) const {
    switch (shape) {
      case ShapeClass::Circle: {
        const double cx = (x1 + x2) / 2, cy = (y1 + y2) / 2, r = (x2 - x1) / 2;
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      }
      case ShapeClass::Square:
        return x >= x1 && x <= x2 && y >= y1 && y <= y2;
      case ShapeClass::Triangle: {
        // Apex at top centre, base along the bottom edge.
        if (y < y1 || y > y2) return false;
        const double t = (y - y1) / (y2 - y1);
        const double half = t * (x2 - x1) / 2;
        const double cx = (x1 + x2) / 2;
        return x >= cx - half && x <= cx + half;
      }
    }
    return false;
  }
};

double overlap_fraction(const Geometry& a, const Geometry& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double smaller = std::min((a.x2 - a.x1) * (a.y2 - a.y1), (b.x2 - b.x1) * (b.y2 - b.y1));
  return iw * ih / smaller;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, int index, const DatasetSpec& spec) {
  if (spec.hw < 16) throw InvalidConfig("image size must be at least 16");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int S = spec.hw;

  // Background: tinted base, linear gradient, low-frequency waves, grain.
  const Rgb base{0.25 + 0.5 * U(rng), 0.25 + 0.5 * U(rng), 0.25 + 0.5 * U(rng)};
  const double gx = (U(rng) - 0.5) * 0.3, gy = (U(rng) - 0.5) * 0.3;
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    waves.push_back({(U(rng) * 4 + 1) * 2 * std::numbers::pi / S,
                     (U(rng) * 4 + 1) * 2 * std::numbers::pi / S, U(rng) * 2 * std::numbers::pi,
                     0.03 + 0.04 * U(rng)});
  }
  std::vector<double> img(static_cast<std::size_t>(S) * S * 3);
  std::normal_distribution<double> grain(0.0, 0.015);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      double tex = gx * (x / double(S) - 0.5) + gy * (y / double(S) - 0.5);
      for (const auto& w : waves) tex += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      const std::size_t o = (static_cast<std::size_t>(y) * S + x) * 3;
      img[o + 0] = base.r + tex + grain(rng);
      img[o + 1] = base.g + tex + grain(rng);
      img[o + 2] = base.b + tex + grain(rng);
    }
  }

  int n_objects = 1;
  if (spec.clutter == 1) n_objects = 1 + static_cast<int>(rng() % 4);
  if (spec.clutter >= 2) n_objects = 1 + static_cast<int>(rng() % 8);
  const double max_overlap = spec.clutter >= 2 ? 0.5 : 0.0;

  std::discrete_distribution<int> pick_class(spec.class_mix.begin(), spec.class_mix.end());
  std::discrete_distribution<int> pick_tier(spec.tier_mix.begin(), spec.tier_mix.end());
  std::vector<Geometry> placed;
  Scene scene;
  scene.height = S;
  scene.width = S;
  for (int k = 0; k < n_objects; ++k) {
    const auto cls = static_cast<ShapeClass>(pick_class(rng));
    const auto tier = static_cast<SizeTier>(pick_tier(rng));
    double lo = 0.07, hi = kSmallSide;
    if (tier == SizeTier::Medium) {
      lo = kSmallSide;
      hi = kMediumSide;
    } else if (tier == SizeTier::Large) {
      lo = kMediumSide;
      hi = 0.45;
    }
    std::optional<Geometry> geom;
    for (int attempt = 0; attempt < 50 && !geom; ++attempt) {
      // Side of the equivalent-area square, kept strictly inside the tier.
      const double side = S * (lo + (hi - lo) * (0.02 + 0.96 * U(rng)));
      const double aspect = cls == ShapeClass::Triangle ? 0.8 + 0.45 * U(rng) : 1.0;
      const double w = side * std::sqrt(aspect);
      const double h = side / std::sqrt(aspect);
      const double x1 = 1.0 + U(rng) * (S - 2.0 - w);
      const double y1 = 1.0 + U(rng) * (S - 2.0 - h);
      Geometry g{cls, x1, y1, x1 + w, y1 + h};
      bool ok = true;
      for (const auto& p : placed) ok = ok && overlap_fraction(g, p) <= max_overlap;
      if (ok) geom = g;
    }
    if (!geom) continue;
    const auto& g = *geom;

    // Fill colour contrasting with the local background.
    const int cx = std::clamp(static_cast<int>((g.x1 + g.x2) / 2), 0, S - 1);
    const int cy = std::clamp(static_cast<int>((g.y1 + g.y2) / 2), 0, S - 1);
    const std::size_t co = (static_cast<std::size_t>(cy) * S + cx) * 3;
    const Rgb local{img[co], img[co + 1], img[co + 2]};
    Rgb fill{U(rng), U(rng), U(rng)};
    for (int tries = 0; tries < 20 && std::abs(fill.luma() - local.luma()) < 0.3; ++tries) {
      fill = {U(rng), U(rng), U(rng)};
    }
    if (std::abs(fill.luma() - local.luma()) < 0.3) {
      const double v = local.luma() > 0.5 ? 0.05 : 0.95;
      fill = {v, v, v};
    }

    // 4x4 supersampled coverage for anti-aliased edges.
    const int px1 = std::max(0, static_cast<int>(std::floor(g.x1)));
    const int py1 = std::max(0, static_cast<int>(std::floor(g.y1)));
    const int px2 = std::min(S - 1, static_cast<int>(std::ceil(g.x2)));
    const int py2 = std::min(S - 1, static_cast<int>(std::ceil(g.y2)));
    for (int y = py1; y <= py2; ++y) {
      for (int x = px1; x <= px2; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy) {
          for (int sx = 0; sx < 4; ++sx) {
            hits += g.contains(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
          }
        }
        if (hits == 0) continue;
        const double a = hits / 16.0;
        const std::size_t o = (static_cast<std::size_t>(y) * S + x) * 3;
        img[o + 0] = (1 - a) * img[o + 0] + a * fill.r;
        img[o + 1] = (1 - a) * img[o + 1] + a * fill.g;
        img[o + 2] = (1 - a) * img[o + 2] + a * fill.b;
      }
    }
    placed.push_back(g);
    SceneObject obj;
    obj.category = static_cast<int>(cls);
    obj.box = {(g.x1 + g.x2) / 2 / S, (g.y1 + g.y2) / 2 / S, (g.x2 - g.x1) / S, (g.y2 - g.y1) / S};
    obj.tier = size_tier((g.x2 - g.x1) * (g.y2 - g.y1), S);
    scene.objects.push_back(obj);
  }

  scene.pixels.resize(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    scene.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  }
  return scene;
}

std::vector<Scene> generate_dataset(std::uint64_t seed, int n_images, const DatasetSpec& spec) {
  if (n_images < 1) throw InvalidConfig("dataset needs at least one image");
  std::vector<Scene> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) out.push_back(generate_scene(seed, i, spec));
  return out;
}

torch::Tensor images_tensor(const std::vector<Scene>& scenes, const std::vector<int>& indices) {
  if (indices.empty()) throw InvalidConfig("empty batch");
  const int H = scenes[indices[0]].height;
  const int W = scenes[indices[0]].width;
  auto out = torch::empty({static_cast<int64_t>(indices.size()), 3, H, W});
  auto acc = out.accessor<float, 4>();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = scenes[indices[b]];
    if (s.height != H || s.width != W) throw ShapeError("batch mixes image sizes");
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
        for (int c = 0; c < 3; ++c) acc[b][c][y][x] = s.pixels[o + c] / 255.0f;
      }
    }
  }
  return out;
}

std::vector<ImageTargets> targets_of(const std::vector<Scene>& scenes, const std::vector<int>& indices) {
  std::vector<ImageTargets> out;
  for (int i : indices) {
    const auto& s = scenes[i];
    const auto n = static_cast<int64_t>(s.objects.size());
    ImageTargets t;
    t.boxes = torch::zeros({n, 4});
    t.labels = torch::zeros({n}, torch::kLong);
    for (int64_t k = 0; k < n; ++k) {
      for (int c = 0; c < 4; ++c) t.boxes[k][c] = s.objects[k].box[c];
      t.labels[k] = s.objects[k].category;
    }
    out.push_back(t);
  }
  return out;
}

namespace {

std::string image_name(int i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i << ".ppm";
  return os.str();
}

void write_ppm(const std::filesystem::path& p, const Scene& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << "P6\n" << s.width << " " << s.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
}

void read_ppm(const std::filesystem::path& p, Scene& s) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  if (magic != "P6" || maxv != 255 || w <= 0 || h <= 0) throw Error(p.string() + ": not an 8-bit P6 image");
  s.width = w;
  s.height = h;
  s.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
  if (!in) throw Error(p.string() + ": truncated image");
}

}  // namespace

void save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                  const DatasetSpec& spec, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (int c = 0; c < kNumShapeClasses; ++c) categories.push_back({{"id", c}, {"name", class_name(c)}});
  int ann_id = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    const auto name = image_name(static_cast<int>(i));
    write_ppm(dir / "images" / name, s);
    images.push_back({{"id", i}, {"file_name", "images/" + name}, {"height", s.height}, {"width", s.width}});
    for (const auto& o : s.objects) {
      const double w = o.box[2] * s.width, h = o.box[3] * s.height;
      const double x = o.box[0] * s.width - w / 2, y = o.box[1] * s.height - h / 2;
      annotations.push_back({{"id", ann_id++},
                             {"image_id", i},
                             {"category_id", o.category},
                             {"bbox", {x, y, w, h}},
                             {"area", w * h},
                             {"iscrowd", 0},
                             {"size_tier", to_string(o.tier)}});
    }
  }
  json info = {{"generator", "stagedepth synthetic shapes"},
               {"seed", seed},
               {"hw", spec.hw},
               {"clutter", spec.clutter},
               {"class_mix", spec.class_mix},
               {"tier_mix", spec.tier_mix}};
  write_text_atomic(dir / "annotations.json",
                    json{{"info", info}, {"images", images}, {"annotations", annotations},
                         {"categories", categories}}
                        .dump(1));
}

std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  const json j = read_json_file(dir / "annotations.json");
  std::vector<Scene> scenes;
  std::map<int64_t, std::size_t> by_id;
  for (const auto& im : j.at("images")) {
    Scene s;
    read_ppm(dir / im.at("file_name").get<std::string>(), s);
    by_id[im.at("id").get<int64_t>()] = scenes.size();
    scenes.push_back(std::move(s));
  }
  for (const auto& a : j.at("annotations")) {
    auto it = by_id.find(a.at("image_id").get<int64_t>());
    if (it == by_id.end()) throw InvalidSpec("annotation references unknown image");
    auto& s = scenes[it->second];
    const auto bbox = a.at("bbox").get<std::vector<double>>();
    if (bbox.size() != 4) throw InvalidSpec("bbox must have 4 entries");
    SceneObject o;
    o.category = a.at("category_id").get<int>();
    o.box = {(bbox[0] + bbox[2] / 2) / s.width, (bbox[1] + bbox[3] / 2) / s.height,
             bbox[2] / s.width, bbox[3] / s.height};
    o.tier = size_tier(bbox[2] * bbox[3], std::min(s.width, s.height));
    s.objects.push_back(o);
  }
  return scenes;
}

}  // namespace stagedepth
