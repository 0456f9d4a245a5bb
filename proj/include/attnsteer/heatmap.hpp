#pragma once

#include <fstream>

#include "attnsteer/tensor.hpp"

namespace attnsteer {

/// 8-bit grayscale PGM (binary P5) of a nonnegative map, min-max normalized,
/// with a raw-float CSV sidecar at path + ".csv". A constant map normalizes to
/// all-zero pixels by convention.
inline void dump_heatmap(const Tensor& a, const std::string& path) {
  require(a.shape.size() == 2, "dump_heatmap: map must be a matrix, got " + a.shape_str());
  for (double v : a.data)
    require(v >= 0.0, "dump_heatmap: negative value in map");
  const int h = a.shape[0], w = a.shape[1];

  double lo = a.data[0], hi = a.data[0];
  for (double v : a.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream pgm(path, std::ios::binary | std::ios::trunc);
  if (!pgm) throw io_error("cannot open heatmap for writing: " + path);
  pgm << "P5\n" << w << " " << h << "\n255\n";
  for (double v : a.data) {
    unsigned char px = 0;
    if (hi > lo)
      px = static_cast<unsigned char>(std::lround((v - lo) / (hi - lo) * 255.0));
    pgm.put(static_cast<char>(px));
  }
  if (!pgm) throw io_error("write failed for heatmap: " + path);

  std::string csv_path = path + ".csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw io_error("cannot open heatmap csv for writing: " + csv_path);
  char cell[32];
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      std::snprintf(cell, sizeof(cell), "%.17g", a.at(r, c));
      csv << cell << (c + 1 < w ? "," : "\n");
    }
  }
  if (!csv) throw io_error("write failed for heatmap csv: " + csv_path);
}

/// Read back a heatmap sidecar CSV. %.17g output makes this round-trip
/// bit-exact for finite doubles.
inline Tensor read_heatmap_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open heatmap csv: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t comma = line.find(',', pos);
      std::string cell =
          line.substr(pos, comma == std::string::npos ? line.size() - pos : comma - pos);
      size_t used = 0;
      double v = std::stod(cell, &used);
      require(used == cell.size(), "heatmap csv: bad cell \"" + cell + "\" in " + path);
      row.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (!rows.empty())
      require(row.size() == rows[0].size(), "heatmap csv: ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), "heatmap csv: empty file " + path);
  Tensor t = Tensor::zeros({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      t.at(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
  return t;
}

}  // namespace attnsteer
