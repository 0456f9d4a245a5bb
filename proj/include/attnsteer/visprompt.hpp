#pragma once

#include <variant>

#include <json.hpp>

#include "attnsteer/tensor.hpp"

namespace attnsteer {

// Referring inputs on the unit square. All coordinates are normalized to
// [0,1]^2 with x horizontal (column direction) and y vertical (row
// direction); the visual-token grid cell (row r, col c) has its center at
// ((c+0.5)/g, (r+0.5)/g).

struct BoxPrompt {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct MaskPrompt {
  int g = 0;
  std::vector<uint8_t> cells;  // row-major g*g, nonzero = selected
};

struct ScribblePrompt {
  std::vector<std::pair<double, double>> points;  // ordered (x, y)
};

struct PointPrompt {
  double x = 0, y = 0;
};

struct VisualPrompt {
  std::variant<BoxPrompt, MaskPrompt, ScribblePrompt, PointPrompt> shape;

  static VisualPrompt box(double x0, double y0, double x1, double y1) {
    require(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0,
            "box prompt: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1");
    return {BoxPrompt{x0, y0, x1, y1}};
  }
  static VisualPrompt mask(int g, std::vector<uint8_t> cells) {
    require(g >= 1 && cells.size() == static_cast<size_t>(g) * g,
            "mask prompt: cell buffer must be g*g");
    bool any = false;
    for (uint8_t c : cells) any = any || c != 0;
    require(any, "mask prompt: at least one cell must be set");
    return {MaskPrompt{g, std::move(cells)}};
  }
  static VisualPrompt scribble(std::vector<std::pair<double, double>> pts) {
    require(!pts.empty(), "scribble prompt: needs at least one point");
    for (auto [x, y] : pts)
      require(0.0 <= x && x <= 1.0 && 0.0 <= y && y <= 1.0,
              "scribble prompt: point outside [0,1]^2");
    return {ScribblePrompt{std::move(pts)}};
  }
  static VisualPrompt point(double x, double y) {
    require(0.0 <= x && x <= 1.0 && 0.0 <= y && y <= 1.0,
            "point prompt: outside [0,1]^2");
    return {PointPrompt{x, y}};
  }

  const char* kind() const {
    switch (shape.index()) {
      case 0: return "box";
      case 1: return "mask";
      case 2: return "scribble";
      default: return "point";
    }
  }
};

struct RegionMask {
  int g = 0;
  std::vector<uint8_t> cells;  // row-major g*g
  int count = 0;

  bool contains(int row, int col) const {
    return cells[static_cast<size_t>(row) * g + col] != 0;
  }
};

struct SoftWeightMap {
  Tensor weights;  // [g x g], nonnegative
  double sigma = 0.1;
  bool normalized = true;
};

namespace detail {

// Grid cell holding a normalized point; x == 1 or y == 1 lands in the last
// row/column rather than off the grid.
inline std::pair<int, int> cell_of(double x, double y, int g) {
  int col = std::min(static_cast<int>(x * g), g - 1);
  int row = std::min(static_cast<int>(y * g), g - 1);
  return {row, col};
}

}  // namespace detail

/// Hard g x g membership mask. Boxes select cells whose centers lie inside
/// (closed containment); masks pass through; scribbles and points select the
/// cells that contain a prompt point.
inline RegionMask rasterize(const VisualPrompt& prompt, int g) {
  require(g >= 1, "rasterize: grid side must be >= 1");
  RegionMask r;
  r.g = g;
  r.cells.assign(static_cast<size_t>(g) * g, 0);
  if (const auto* b = std::get_if<BoxPrompt>(&prompt.shape)) {
    for (int row = 0; row < g; ++row)
      for (int col = 0; col < g; ++col) {
        double cx = (col + 0.5) / g;
        double cy = (row + 0.5) / g;
        if (b->x0 <= cx && cx <= b->x1 && b->y0 <= cy && cy <= b->y1)
          r.cells[static_cast<size_t>(row) * g + col] = 1;
      }
  } else if (const auto* m = std::get_if<MaskPrompt>(&prompt.shape)) {
    require(m->g == g, "rasterize: mask grid " + std::to_string(m->g) +
                           " does not match requested grid " + std::to_string(g));
    for (size_t i = 0; i < r.cells.size(); ++i) r.cells[i] = m->cells[i] ? 1 : 0;
  } else if (const auto* s = std::get_if<ScribblePrompt>(&prompt.shape)) {
    for (auto [x, y] : s->points) {
      auto [row, col] = detail::cell_of(x, y, g);
      r.cells[static_cast<size_t>(row) * g + col] = 1;
    }
  } else {
    const auto& p = std::get<PointPrompt>(prompt.shape);
    auto [row, col] = detail::cell_of(p.x, p.y, g);
    r.cells[static_cast<size_t>(row) * g + col] = 1;
  }
  for (uint8_t c : r.cells) r.count += c;
  require(r.count >= 1, std::string("rasterize: ") + prompt.kind() +
                            " prompt selects no cell on a " + std::to_string(g) + "x" +
                            std::to_string(g) + " grid");
  return r;
}

/// Exact Euclidean distance, in normalized coordinates, from each cell center
/// to the nearest prompt point. Brute force over all points; the grids in
/// play are small enough that this is also the reference definition.
inline Tensor distance_transform(const VisualPrompt& prompt, int g) {
  require(g >= 1, "distance_transform: grid side must be >= 1");
  std::vector<std::pair<double, double>> pts;
  if (const auto* s = std::get_if<ScribblePrompt>(&prompt.shape)) {
    pts = s->points;
  } else if (const auto* p = std::get_if<PointPrompt>(&prompt.shape)) {
    pts.emplace_back(p->x, p->y);
  } else {
    throw std::invalid_argument(
        std::string("distance_transform: expects a scribble or point prompt, got ") +
        prompt.kind());
  }
  require(!pts.empty(), "distance_transform: empty point list");
  Tensor d = Tensor::zeros({g, g});
  for (int row = 0; row < g; ++row)
    for (int col = 0; col < g; ++col) {
      double cx = (col + 0.5) / g;
      double cy = (row + 0.5) / g;
      double best = std::numeric_limits<double>::infinity();
      for (auto [px, py] : pts) {
        double dx = cx - px, dy = cy - py;
        best = std::min(best, std::sqrt(dx * dx + dy * dy));
      }
      d.at(row, col) = best;
    }
  return d;
}

/// Gaussian weights over a distance field: w = exp(-D^2 / (2 sigma^2)) scaled
/// by the pdf peak 1/(sqrt(2 pi) sigma) in raw mode, or left with peak 1 in
/// normalized mode (the default, keeping downstream mass ratios inside [0,1]).
inline SoftWeightMap soft_weight_map(const Tensor& d, double sigma, bool normalized = true) {
  require(sigma > 0.0, "soft_weight_map: sigma must be positive, got " +
                           std::to_string(sigma));
  require(d.shape.size() == 2, "soft_weight_map: distance field must be a matrix");
  SoftWeightMap w;
  w.sigma = sigma;
  w.normalized = normalized;
  w.weights = Tensor::zeros(d.shape);
  const double peak = 1.0 / (std::sqrt(2.0 * M_PI) * sigma);
  for (size_t i = 0; i < d.data.size(); ++i) {
    require(d.data[i] >= 0.0, "soft_weight_map: negative distance");
    double core = std::exp(-(d.data[i] * d.data[i]) / (2.0 * sigma * sigma));
    w.weights.data[i] = normalized ? core : core * peak;
  }
  return w;
}

// --- JSON prompt files --------------------------------------------------------
//
// {"type":"box","coords":[x0,y0,x1,y1]}
// {"type":"mask","grid":[[0,1,...],...]}
// {"type":"scribble","points":[[x,y],...]}
// {"type":"point","point":[x,y]}

inline VisualPrompt prompt_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("type"), "prompt json: missing \"type\"");
  std::string type = j.at("type").get<std::string>();
  if (type == "box") {
    const auto& c = j.at("coords");
    require(c.is_array() && c.size() == 4, "prompt json: box needs coords [x0,y0,x1,y1]");
    return VisualPrompt::box(c[0].get<double>(), c[1].get<double>(), c[2].get<double>(),
                             c[3].get<double>());
  }
  if (type == "mask") {
    const auto& rows = j.at("grid");
    require(rows.is_array() && !rows.empty(), "prompt json: mask needs a grid of rows");
    int g = static_cast<int>(rows.size());
    std::vector<uint8_t> cells;
    cells.reserve(static_cast<size_t>(g) * g);
    for (const auto& row : rows) {
      require(row.is_array() && static_cast<int>(row.size()) == g,
              "prompt json: mask grid must be square");
      for (const auto& v : row) cells.push_back(v.get<int>() != 0 ? 1 : 0);
    }
    return VisualPrompt::mask(g, std::move(cells));
  }
  if (type == "scribble") {
    const auto& pts = j.at("points");
    require(pts.is_array() && !pts.empty(), "prompt json: scribble needs points");
    std::vector<std::pair<double, double>> v;
    for (const auto& p : pts) {
      require(p.is_array() && p.size() == 2, "prompt json: point must be [x,y]");
      v.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    return VisualPrompt::scribble(std::move(v));
  }
  if (type == "point") {
    const auto& p = j.at("point");
    require(p.is_array() && p.size() == 2, "prompt json: point must be [x,y]");
    return VisualPrompt::point(p[0].get<double>(), p[1].get<double>());
  }
  throw std::invalid_argument("prompt json: unknown type \"" + type + "\"");
}

inline nlohmann::json prompt_to_json(const VisualPrompt& prompt) {
  nlohmann::json j;
  j["type"] = prompt.kind();
  if (const auto* b = std::get_if<BoxPrompt>(&prompt.shape)) {
    j["coords"] = {b->x0, b->y0, b->x1, b->y1};
  } else if (const auto* m = std::get_if<MaskPrompt>(&prompt.shape)) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < m->g; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (int c = 0; c < m->g; ++c)
        row.push_back(static_cast<int>(m->cells[static_cast<size_t>(r) * m->g + c]));
      rows.push_back(std::move(row));
    }
    j["grid"] = std::move(rows);
  } else if (const auto* s = std::get_if<ScribblePrompt>(&prompt.shape)) {
    nlohmann::json pts = nlohmann::json::array();
    for (auto [x, y] : s->points) pts.push_back({x, y});
    j["points"] = std::move(pts);
  } else {
    const auto& p = std::get<PointPrompt>(prompt.shape);
    j["point"] = {p.x, p.y};
  }
  return j;
}

}  // namespace attnsteer
