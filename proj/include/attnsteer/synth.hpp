#pragma once

#include <array>

#include "attnsteer/visprompt.hpp"

namespace attnsteer {

// Synthetic referring task. Images are g x g grids holding 2..4 disjoint
// rectangular objects, each with a distinct color and some shape; per-cell
// features are one-hot color/shape codes plus a little Gaussian noise. The
// closed caption language is small enough for a desk-scale decoder to learn,
// and the question template deliberately omits the location ("here") so that
// only attention steering can tell the model which object is meant.

namespace vocab {

inline constexpr int kEos = 0;
inline constexpr int kObj = 1;
inline constexpr int kAt = 2;
inline constexpr int kIs = 3;
inline constexpr int kHere = 4;
inline constexpr int kRegion0 = 5;   // 9 coarse 3x3 location tokens, ids 5..13
inline constexpr int kColor0 = 14;   // 4 colors, ids 14..17
inline constexpr int kShape0 = 18;   // 4 shapes, ids 18..21
inline constexpr int kNumRegions = 9;
inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 4;
inline constexpr int kUsed = 22;     // ids beyond this are reserved padding

inline std::string token_name(int id) {
  static const std::array<const char*, 4> colors = {"red", "green", "blue", "yellow"};
  static const std::array<const char*, 4> shapes = {"square", "circle", "triangle",
                                                    "diamond"};
  switch (id) {
    case kEos: return "<eos>";
    case kObj: return "object";
    case kAt: return "at";
    case kIs: return "is";
    case kHere: return "here";
    default: break;
  }
  if (id >= kRegion0 && id < kRegion0 + kNumRegions)
    return "region" + std::to_string(id - kRegion0);
  if (id >= kColor0 && id < kColor0 + kNumColors)
    return colors[static_cast<size_t>(id - kColor0)];
  if (id >= kShape0 && id < kShape0 + kNumShapes)
    return shapes[static_cast<size_t>(id - kShape0)];
  return "tok" + std::to_string(id);
}

}  // namespace vocab

inline constexpr int kFeatDim = 9;        // occupancy + 4 color slots + 4 shape slots
inline constexpr double kFeatNoise = 0.05;

struct SceneObject {
  int color = 0;  // 0..3
  int shape = 0;  // 0..3
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // cell block [r0,r1) x [c0,c1)

  int center_cell_row() const { return (r0 + r1 - 1) / 2; }
  int center_cell_col() const { return (c0 + c1 - 1) / 2; }
  double center_x(int g) const { return (c0 + 0.5 * (c1 - c0)) / g; }
  double center_y(int g) const { return (r0 + 0.5 * (r1 - r0)) / g; }
};

struct SyntheticImage {
  int g = 0;
  uint64_t noise_seed = 0;
  std::vector<SceneObject> objects;

  /// Index of the object covering a cell, or -1.
  int object_at(int row, int col) const {
    for (size_t i = 0; i < objects.size(); ++i) {
      const SceneObject& o = objects[i];
      if (o.r0 <= row && row < o.r1 && o.c0 <= col && col < o.c1)
        return static_cast<int>(i);
    }
    return -1;
  }

  /// Per-cell feature rows [g*g x kFeatDim]: occupancy flag, color one-hot,
  /// shape one-hot, all perturbed by seeded Gaussian noise. Regenerating from
  /// the stored seed keeps datasets compact and bit-reproducible.
  Tensor features() const {
    Tensor f = Tensor::zeros({g * g, kFeatDim});
    for (int row = 0; row < g; ++row)
      for (int col = 0; col < g; ++col) {
        int oi = object_at(row, col);
        if (oi < 0) continue;
        double* cell = &f.data[static_cast<size_t>(row * g + col) * kFeatDim];
        cell[0] = 1.0;
        cell[1 + objects[static_cast<size_t>(oi)].color] = 1.0;
        cell[1 + vocab::kNumColors + objects[static_cast<size_t>(oi)].shape] = 1.0;
      }
    Rng noise(noise_seed);
    for (double& v : f.data) v += noise.gaussian() * kFeatNoise;
    return f;
  }
};

/// Coarse 3x3 location token for an object, from its normalized center.
inline int region_token_of(const SyntheticImage& img, int obj_idx) {
  const SceneObject& o = img.objects[static_cast<size_t>(obj_idx)];
  int rr = std::min(static_cast<int>(o.center_y(img.g) * 3.0), 2);
  int cc = std::min(static_cast<int>(o.center_x(img.g) * 3.0), 2);
  return vocab::kRegion0 + rr * 3 + cc;
}

/// Training caption: "object at <where> is <color> <shape> <eos>", where
/// <where> is either the coarse region token or the location-free "here".
inline std::vector<int> make_caption(const SyntheticImage& img, int obj_idx, bool use_here) {
  const SceneObject& o = img.objects[static_cast<size_t>(obj_idx)];
  int where = use_here ? vocab::kHere : region_token_of(img, obj_idx);
  return {vocab::kObj,  vocab::kAt,
          where,        vocab::kIs,
          vocab::kColor0 + o.color, vocab::kShape0 + o.shape,
          vocab::kEos};
}

/// The fixed evaluation question: "object at here is". Its answer-start row is
/// the final "is" position; the location is deliberately unspecified.
inline std::vector<int> roc_question() {
  return {vocab::kObj, vocab::kAt, vocab::kHere, vocab::kIs};
}

struct RocSample {
  SyntheticImage image;
  int referred = 0;  // object index the prompt targets
  VisualPrompt prompt;
  std::vector<int> question;
  int answer_a = 0;  // color token, candidate A
  int answer_b = 0;  // color token, candidate B
  int truth = 0;     // equals one of the two candidates
};

struct Dataset {
  int grid = 8;
  uint64_t seed = 0;
  std::vector<RocSample> samples;
};

namespace detail {

inline bool blocks_clash(const SceneObject& a, int r0, int c0, int r1, int c1) {
  // Expanded by the one-cell margin.
  return !(r1 + 1 <= a.r0 || a.r1 + 1 <= r0 || c1 + 1 <= a.c0 || a.c1 + 1 <= c0);
}

inline SyntheticImage gen_image(Rng& rng, int g) {
  require(g >= 4, "gen_image: grid side " + std::to_string(g) +
                      " too small to place two separated objects");
  const int size_max = g >= 8 ? 3 : (g >= 6 ? 2 : 1);
  SyntheticImage img;
  img.g = g;
  img.noise_seed = rng.next_u64();
  int want = rng.uniform_int(2, 4);
  std::array<int, vocab::kNumColors> colors = {0, 1, 2, 3};
  // Fisher-Yates so per-image colors are distinct.
  for (int i = vocab::kNumColors - 1; i > 0; --i)
    std::swap(colors[static_cast<size_t>(i)], colors[static_cast<size_t>(rng.uniform_int(0, i))]);
  want = std::min(want, vocab::kNumColors);
  for (int k = 0; k < want; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      int h = rng.uniform_int(1, size_max);
      int w = rng.uniform_int(1, size_max);
      int r0 = rng.uniform_int(0, g - h);
      int c0 = rng.uniform_int(0, g - w);
      bool clash = false;
      for (const SceneObject& o : img.objects)
        clash = clash || blocks_clash(o, r0, c0, r0 + h, c0 + w);
      if (clash) continue;
      SceneObject o;
      o.color = colors[static_cast<size_t>(k)];
      o.shape = rng.uniform_int(0, vocab::kNumShapes - 1);
      o.r0 = r0;
      o.c0 = c0;
      o.r1 = r0 + h;
      o.c1 = c0 + w;
      img.objects.push_back(o);
      placed = true;
    }
    if (!placed && static_cast<int>(img.objects.size()) >= 2) break;
    require(placed || static_cast<int>(img.objects.size()) >= 2,
            "gen_image: could not place two separated objects on a " + std::to_string(g) +
                "x" + std::to_string(g) + " grid");
  }
  return img;
}

inline VisualPrompt prompt_for_object(Rng& rng, const SyntheticImage& img, int obj_idx,
                                      int variant) {
  const SceneObject& o = img.objects[static_cast<size_t>(obj_idx)];
  const int g = img.g;
  switch (variant) {
    case 0:
      return VisualPrompt::box(static_cast<double>(o.c0) / g, static_cast<double>(o.r0) / g,
                               static_cast<double>(o.c1) / g, static_cast<double>(o.r1) / g);
    case 1: {
      std::vector<uint8_t> cells(static_cast<size_t>(g) * g, 0);
      for (int r = o.r0; r < o.r1; ++r)
        for (int c = o.c0; c < o.c1; ++c) cells[static_cast<size_t>(r) * g + c] = 1;
      return VisualPrompt::mask(g, std::move(cells));
    }
    case 2: {
      // Three jittered points strictly inside the block.
      std::vector<std::pair<double, double>> pts;
      for (int j = 0; j < 3; ++j) {
        double u = 0.1 + 0.8 * rng.uniform();
        double v = 0.1 + 0.8 * rng.uniform();
        pts.emplace_back((o.c0 + u * (o.c1 - o.c0)) / g, (o.r0 + v * (o.r1 - o.r0)) / g);
      }
      return VisualPrompt::scribble(std::move(pts));
    }
    default:
      return VisualPrompt::point(o.center_x(g), o.center_y(g));
  }
}

}  // namespace detail

/// Deterministic referring dataset. Prompt variants cycle box, mask, scribble,
/// point; the correct answer sits in slot A on even indices so the two-way
/// choice is exactly balanced.
inline Dataset gen_dataset(int n, uint64_t seed, int g) {
  require(n >= 1, "gen_dataset: n must be >= 1");
  Dataset ds;
  ds.grid = g;
  ds.seed = seed;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    RocSample s;
    s.image = detail::gen_image(rng, g);
    int n_obj = static_cast<int>(s.image.objects.size());
    s.referred = rng.uniform_int(0, n_obj - 1);
    s.prompt = detail::prompt_for_object(rng, s.image, s.referred, i % 4);
    s.question = roc_question();
    s.truth = vocab::kColor0 + s.image.objects[static_cast<size_t>(s.referred)].color;
    int other = rng.uniform_int(0, n_obj - 2);
    if (other >= s.referred) ++other;
    int distractor = vocab::kColor0 + s.image.objects[static_cast<size_t>(other)].color;
    if (i % 2 == 0) {
      s.answer_a = s.truth;
      s.answer_b = distractor;
    } else {
      s.answer_a = distractor;
      s.answer_b = s.truth;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// --- dataset files ----------------------------------------------------------------

inline nlohmann::json image_to_json(const SyntheticImage& img) {
  nlohmann::json objs = nlohmann::json::array();
  for (const SceneObject& o : img.objects)
    objs.push_back({{"color", o.color},
                    {"shape", o.shape},
                    {"r0", o.r0},
                    {"c0", o.c0},
                    {"r1", o.r1},
                    {"c1", o.c1}});
  return nlohmann::json{
      {"grid", img.g}, {"noise_seed", img.noise_seed}, {"objects", std::move(objs)}};
}

inline SyntheticImage image_from_json(const nlohmann::json& j) {
  SyntheticImage img;
  img.g = j.at("grid").get<int>();
  img.noise_seed = j.at("noise_seed").get<uint64_t>();
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.color = jo.at("color").get<int>();
    o.shape = jo.at("shape").get<int>();
    o.r0 = jo.at("r0").get<int>();
    o.c0 = jo.at("c0").get<int>();
    o.r1 = jo.at("r1").get<int>();
    o.c1 = jo.at("c1").get<int>();
    require(0 <= o.r0 && o.r0 < o.r1 && o.r1 <= img.g && 0 <= o.c0 && o.c0 < o.c1 &&
                o.c1 <= img.g,
            "image json: object block out of bounds");
    img.objects.push_back(o);
  }
  require(!img.objects.empty(), "image json: no objects");
  return img;
}

inline nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json samples = nlohmann::json::array();
  for (const RocSample& s : ds.samples)
    samples.push_back({{"image", image_to_json(s.image)},
                       {"referred", s.referred},
                       {"prompt", prompt_to_json(s.prompt)},
                       {"question", s.question},
                       {"answer_a", s.answer_a},
                       {"answer_b", s.answer_b},
                       {"truth", s.truth}});
  nlohmann::json j{{"grid", ds.grid}, {"seed", ds.seed}, {"samples", std::move(samples)}};
  std::string canon = j.dump();
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canon.data(), canon.size())));
  j["digest"] = digest;
  return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  Dataset ds;
  ds.grid = j.at("grid").get<int>();
  ds.seed = j.at("seed").get<uint64_t>();
  for (const auto& js : j.at("samples")) {
    RocSample s;
    s.image = image_from_json(js.at("image"));
    require(s.image.g == ds.grid, "dataset json: image grid differs from dataset grid");
    s.referred = js.at("referred").get<int>();
    require(0 <= s.referred && s.referred < static_cast<int>(s.image.objects.size()),
            "dataset json: referred index out of range");
    s.prompt = prompt_from_json(js.at("prompt"));
    s.question = js.at("question").get<std::vector<int>>();
    s.answer_a = js.at("answer_a").get<int>();
    s.answer_b = js.at("answer_b").get<int>();
    s.truth = js.at("truth").get<int>();
    require(s.truth == s.answer_a || s.truth == s.answer_b,
            "dataset json: truth is not one of the candidates");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Digest over the canonical serialized form, minus the digest field itself.
inline std::string dataset_digest(const Dataset& ds) {
  nlohmann::json j = dataset_to_json(ds);
  return j.at("digest").get<std::string>();
}

}  // namespace attnsteer
