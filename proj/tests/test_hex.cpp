#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <queue>
#include <set>

#include "spackle/hex.hpp"
#include "spackle/synthetic.hpp"

using namespace spackle;

namespace {

// Independent distance oracle: BFS over the unit-distance graph of spot
// centers embedded in the plane, run on a lattice padded far beyond the
// slide so boundary effects cannot shorten or lengthen paths.
struct OracleLattice {
  std::map<std::pair<int, int>, int> id;
  std::vector<std::pair<double, double>> pos;

  explicit OracleLattice(int lo, int hi) {
    for (int r = lo; r < hi; ++r)
      for (int c = lo; c < hi; ++c) {
        id[{r, c}] = static_cast<int>(pos.size());
        pos.emplace_back(c + 0.5 * (r & 1), r * std::sqrt(3.0) / 2.0);
      }
  }

  std::vector<int> bfs_distances(int r0, int c0) const {
    std::vector<std::vector<int>> adj(pos.size());
    for (const auto& [rc_a, a] : id)
      for (const auto& [rc_b, b] : id) {
        if (a == b) continue;
        double dx = pos[(std::size_t)a].first - pos[(std::size_t)b].first;
        double dy = pos[(std::size_t)a].second - pos[(std::size_t)b].second;
        if (std::abs(std::sqrt(dx * dx + dy * dy) - 1.0) < 1e-9) adj[(std::size_t)a].push_back(b);
      }
    std::vector<int> dist(pos.size(), -1);
    std::queue<int> q;
    int start = id.at({r0, c0});
    dist[(std::size_t)start] = 0;
    q.push(start);
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (int v : adj[(std::size_t)u])
        if (dist[(std::size_t)v] < 0) {
          dist[(std::size_t)v] = dist[(std::size_t)u] + 1;
          q.push(v);
        }
    }
    return dist;
  }
};

Dataset full_slide(int rows, int cols) {
  return generate_synthetic(1, rows, cols, 1, 0.0, 8.0, 11);
}

}  // namespace

TEST_CASE("axial conversion round-trips") {
  for (int r = -5; r <= 12; ++r)
    for (int c = -5; c <= 12; ++c) {
      auto a = axial_from_offset(r, c);
      auto [rr, cc] = offset_from_axial(a);
      REQUIRE(rr == r);
      REQUIRE(cc == c);
    }
}

TEST_CASE("ring sizes and clockwise-from-east order") {
  Axial center = axial_from_offset(6, 6);
  auto ring1 = axial_ring(center, 1);
  auto ring2 = axial_ring(center, 2);
  REQUIRE(ring1.size() == 6);
  REQUIRE(ring2.size() == 12);
  // due-east first
  REQUIRE(ring1[0] == Axial{center.q + 1, center.r});
  REQUIRE(ring2[0] == Axial{center.q + 2, center.r});
  // every ring cell is at the right hex distance, and no duplicates
  std::set<std::pair<int, int>> seen;
  for (auto a : ring1) {
    REQUIRE(hex_distance(center, a) == 1);
    REQUIRE(seen.insert({a.q, a.r}).second);
  }
  for (auto a : ring2) {
    REQUIRE(hex_distance(center, a) == 2);
    REQUIRE(seen.insert({a.q, a.r}).second);
  }
  // consecutive ring cells are lattice neighbors (a contiguous walk)
  for (std::size_t i = 0; i + 1 < ring2.size(); ++i)
    REQUIRE(hex_distance(ring2[i], ring2[i + 1]) == 1);
}

TEST_CASE("interior neighbor counts are 6 and 18") {
  Dataset ds = full_slide(9, 9);
  HexIndex idx = HexIndex::build(ds, "slide_0");
  REQUIRE(hex_neighbors(idx, 4, 4, 1).size() == 6);
  REQUIRE(hex_neighbors(idx, 4, 4, 2).size() == 18);
}

TEST_CASE("corner spot keeps order and drops absent positions") {
  Dataset ds = generate_synthetic(1, 5, 5, 1, 0.0, 8.0, 3);
  HexIndex idx = HexIndex::build(ds, "slide_0");
  auto n1 = hex_neighbors(idx, 0, 0, 2);
  // corner of the lattice: strictly fewer than 18, all real, no duplicates
  REQUIRE(n1.size() < 18);
  std::set<Eigen::Index> uniq(n1.begin(), n1.end());
  REQUIRE(uniq.size() == n1.size());
  REQUIRE_THROWS_AS(hex_neighbors(idx, 40, 40, 1), ValidationError);
  REQUIRE_THROWS_AS(hex_neighbors(idx, 0, 0, 3), ValidationError);
}

TEST_CASE("1-hop adjacency is symmetric") {
  Dataset ds = full_slide(7, 6);
  HexIndex idx = HexIndex::build(ds, "slide_0");
  auto neighbors_of = [&](Eigen::Index spot) {
    const auto& rec = ds.spots[(std::size_t)spot];
    auto v = hex_neighbors(idx, rec.array_row, rec.array_col, 1);
    return std::set<Eigen::Index>(v.begin(), v.end());
  };
  for (Eigen::Index a = 0; a < ds.num_spots(); ++a)
    for (Eigen::Index b : neighbors_of(a)) REQUIRE(neighbors_of(b).count(a) == 1);
}

TEST_CASE("ring membership matches the BFS distance oracle on 10x10") {
  const int rows = 10, cols = 10;
  Dataset ds = full_slide(rows, cols);
  HexIndex idx = HexIndex::build(ds, "slide_0");
  OracleLattice oracle(-12, 22);  // padded so shortest paths never leave the lattice

  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      auto dist = oracle.bfs_distances(r, c);
      std::set<Eigen::Index> hop1, hop2;
      for (Eigen::Index s : hex_neighbors(idx, r, c, 1)) hop1.insert(s);
      for (Eigen::Index s : hex_neighbors(idx, r, c, 2)) hop2.insert(s);
      for (int rr = 0; rr < rows; ++rr)
        for (int cc = 0; cc < cols; ++cc) {
          if (rr == r && cc == c) continue;
          int d = dist[(std::size_t)oracle.id.at({rr, cc})];
          Eigen::Index spot = *idx.find(rr, cc);
          REQUIRE(hop1.count(spot) == (d == 1 ? 1u : 0u));
          REQUIRE(hop2.count(spot) == (d <= 2 ? 1u : 0u));
        }
    }
}
