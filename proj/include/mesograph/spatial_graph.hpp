#pragma once

// Radius-neighbour cell graphs built with a uniform bucket grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mesograph/csv.hpp"
#include "mesograph/data_model.hpp"
#include "mesograph/matrix.hpp"

namespace mesograph {

inline constexpr double kDefaultRadiusUm = 30.0;

using Edge = std::pair<std::size_t, std::size_t>;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Undirected radius graph over the cells of one bag. Edges are (i, j) with
/// i < j, sorted lexicographically.
struct CellGraph {
  std::size_t n = 0;
  Matrix coords;         // n×2, µm
  Matrix node_features;  // n×d0
  std::vector<Edge> edges;
  BagMeta bag;
  std::vector<std::int64_t> cell_ids;
  std::vector<std::optional<InstanceLabel>> instance_labels;
};

inline bool within_radius(const Point2& a, const Point2& b, double radius_um) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy <= radius_um * radius_um;
}

/// Candidate pairs (i < j) from a uniform grid with bucket size radius_um:
/// each point is compared against its own bucket and the 8 surrounding ones.
/// The result is a superset of the true neighbour pairs, unsorted.
inline std::vector<Edge> grid_neighbors(std::span<const Point2> pts, double radius_um) {
  if (!(radius_um > 0.0)) throw UsageError("grid_neighbors: radius must be positive");
  struct KeyHash {
    std::size_t operator()(const std::pair<std::int64_t, std::int64_t>& k) const {
      return std::hash<std::int64_t>{}(k.first * 73856093LL ^ k.second * 19349663LL);
    }
  };
  std::unordered_map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>, KeyHash> buckets;
  std::vector<std::pair<std::int64_t, std::int64_t>> key(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    key[i] = {static_cast<std::int64_t>(std::floor(pts[i].x / radius_um)),
              static_cast<std::int64_t>(std::floor(pts[i].y / radius_um))};
    buckets[key[i]].push_back(i);
  }
  std::vector<Edge> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        const auto it = buckets.find({key[i].first + dx, key[i].second + dy});
        if (it == buckets.end()) continue;
        for (std::size_t j : it->second)
          if (j > i) out.emplace_back(i, j);
      }
    }
  }
  return out;
}

/// Edge set {(i, j) : i < j, dist(i, j) <= radius}. Coincident cells are connected.
inline std::vector<Edge> radius_edges(std::span<const Point2> pts, double radius_um) {
  std::vector<Edge> edges;
  for (const auto& [i, j] : grid_neighbors(pts, radius_um))
    if (within_radius(pts[i], pts[j], radius_um)) edges.emplace_back(i, j);
  std::sort(edges.begin(), edges.end());
  return edges;
}

inline CellGraph build_radius_graph(const Bag& bag, double radius_um = kDefaultRadiusUm) {
  if (!(radius_um > 0.0) || !std::isfinite(radius_um)) {
    throw UsageError("build_radius_graph: radius must be positive, got " + csv::format_double(radius_um));
  }
  CellGraph g;
  g.n = bag.cells.size();
  g.bag = bag.meta;
  const std::size_t d0 = g.n ? bag.cells.front().features.size() : 0;
  g.coords = Matrix(g.n, 2);
  g.node_features = Matrix(g.n, d0);
  std::vector<Point2> pts(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto& c = bag.cells[i];
    if (c.features.size() != d0) throw DataError("bag '" + bag.meta.bag_id + "': ragged feature vectors");
    pts[i] = {c.x_um, c.y_um};
    g.coords(i, 0) = c.x_um;
    g.coords(i, 1) = c.y_um;
    std::copy(c.features.begin(), c.features.end(), g.node_features.row_span(i).begin());
    g.cell_ids.push_back(c.cell_id);
    g.instance_labels.push_back(c.instance_label);
  }
  g.edges = radius_edges(pts, radius_um);
  return g;
}

/// Same graph with node features replaced (e.g. after normalisation).
inline CellGraph with_features(CellGraph g, const Bag& bag) {
  if (bag.cells.size() != g.n) throw UsageError("with_features: node count mismatch");
  for (std::size_t i = 0; i < g.n; ++i) {
    if (bag.cells[i].features.size() != g.node_features.cols()) throw UsageError("with_features: width mismatch");
    std::copy(bag.cells[i].features.begin(), bag.cells[i].features.end(), g.node_features.row_span(i).begin());
  }
  return g;
}

struct DegreeStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

inline std::vector<std::size_t> degrees(const CellGraph& g) {
  std::vector<std::size_t> deg(g.n, 0);
  for (const auto& [i, j] : g.edges) {
    ++deg[i];
    ++deg[j];
  }
  return deg;
}

inline DegreeStats degree_stats(const CellGraph& g) {
  if (g.n == 0) return {};
  const auto deg = degrees(g);
  DegreeStats s;
  s.min = static_cast<double>(*std::min_element(deg.begin(), deg.end()));
  s.max = static_cast<double>(*std::max_element(deg.begin(), deg.end()));
  s.mean = 2.0 * static_cast<double>(g.edges.size()) / static_cast<double>(g.n);
  return s;
}

/// Writes "i j" per edge line.
inline void write_edge_list(const CellGraph& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  for (const auto& [i, j] : g.edges) f << i << ' ' << j << '\n';
}

inline void write_node_table(const CellGraph& g, const std::string& path) {
  csv::Writer w({"node", "cell_id", "x_um", "y_um"});
  for (std::size_t i = 0; i < g.n; ++i) {
    w.add_row({std::to_string(i), std::to_string(g.cell_ids[i]), csv::format_double(g.coords(i, 0)),
               csv::format_double(g.coords(i, 1))});
  }
  w.save(path);
}

}  // namespace mesograph
