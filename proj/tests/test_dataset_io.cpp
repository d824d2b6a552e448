#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "spackle/dataset.hpp"
#include "spackle/synthetic.hpp"

using namespace spackle;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("spackle_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 2 slides, 8 spots, 4 genes, hand-laid-out.
Dataset small_fixture() {
  Dataset ds;
  ds.genes = {"g0", "g1", "g2", "g3"};
  for (int s = 0; s < 2; ++s)
    for (int i = 0; i < 4; ++i) {
      SpotRecord r;
      r.slide_id = "s" + std::to_string(s);
      r.spot_id = r.slide_id + "_spot" + std::to_string(i);
      r.array_row = i / 2;
      r.array_col = i % 2;
      r.pixel_x = 10.0 * i + 0.125;
      r.pixel_y = 3.0 * s + 1.0 / 3.0;
      ds.spots.push_back(r);
    }
  ds.split = {{"s0", Split::train}, {"s1", Split::val}};
  ds.raw_counts.resize(8, 4);
  ds.expression.setZero(8, 4);
  ds.observed.setConstant(8, 4, 1);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 4; ++j) ds.raw_counts(i, j) = i * 4 + j + 1;
  ds.observed(3, 1) = 0;
  ds.raw_counts(3, 1) = 0;
  return ds;
}

}  // namespace

TEST_CASE("fixture round-trips through save/load") {
  fs::path dir = temp_dir("roundtrip");
  Dataset ds = small_fixture();
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  REQUIRE(back.num_spots() == 8);
  REQUIRE(back.num_genes() == 4);
  REQUIRE(back.observed(3, 1) == 0);
  REQUIRE(back.expression(3, 1) == 0.0);
  REQUIRE(datasets_equal(ds, back));
  fs::remove_all(dir);
}

TEST_CASE("round-trip preserves awkward doubles exactly") {
  fs::path dir = temp_dir("doubles");
  Dataset ds = small_fixture();
  ds.normalization_applied = true;
  ds.expression(0, 0) = 1.0 / 3.0;
  ds.expression(1, 2) = 1e-300;
  ds.expression(2, 3) = 12345678.87654321;
  ds.expression(4, 1) = 5e-324;  // smallest denormal
  save_dataset(ds, dir);
  Dataset back = load_dataset(dir);
  REQUIRE(back.expression(0, 0) == 1.0 / 3.0);
  REQUIRE(back.expression(1, 2) == 1e-300);
  REQUIRE(back.expression(2, 3) == 12345678.87654321);
  REQUIRE(back.expression(4, 1) == 5e-324);
  REQUIRE(datasets_equal(ds, back));
  fs::remove_all(dir);
}

TEST_CASE("synthetic datasets round-trip exactly") {
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    fs::path dir = temp_dir("synth" + std::to_string(seed));
    Dataset ds = generate_synthetic(2, 6, 6, 5, 0.25, 4.0, seed);
    save_dataset(ds, dir);
    REQUIRE(datasets_equal(ds, load_dataset(dir)));
    fs::remove_all(dir);
  }
}

TEST_CASE("shape mismatch in counts is rejected") {
  fs::path dir = temp_dir("shape");
  save_dataset(small_fixture(), dir);
  // drop the last row of counts.tsv
  std::ifstream in(dir / "counts.tsv");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  in.close();
  lines.pop_back();
  std::ofstream out(dir / "counts.tsv", std::ios::trunc);
  for (const auto& l : lines) out << l << "\n";
  out.close();
  REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("shape mismatch"));
  fs::remove_all(dir);
}

TEST_CASE("missing files and bad labels are rejected") {
  fs::path dir = temp_dir("missing");
  save_dataset(small_fixture(), dir);

  SECTION("missing observed.tsv") {
    fs::remove(dir / "observed.tsv");
    REQUIRE_THROWS_AS(load_dataset(dir), ValidationError);
    // but derivable from counts on demand
    LoadOptions opts;
    opts.zeros_are_missing = true;
    Dataset ds = load_dataset(dir, opts);
    REQUIRE(ds.observed(3, 1) == 0);  // count 0 -> missing
    REQUIRE(ds.observed(0, 0) == 1);
  }
  SECTION("unknown split label") {
    std::ifstream in(dir / "spots.tsv");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto pos = all.find("train");
    all.replace(pos, 5, "dev__");
    std::ofstream out(dir / "spots.tsv", std::ios::trunc);
    out << all;
    out.close();
    REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("unknown split"));
  }
  SECTION("sentinel violation") {
    // expression nonzero at an unobserved entry of an uncompleted dataset
    Dataset ds = small_fixture();
    ds.expression(3, 1) = 0.5;
    REQUIRE_THROWS_WITH(validate_dataset(ds), Catch::Matchers::ContainsSubstring("sentinel"));
  }
  fs::remove_all(dir);
}

TEST_CASE("invariant violations are rejected before write") {
  Dataset ds = small_fixture();
  SECTION("NaN expression") {
    ds.normalization_applied = true;
    ds.expression(1, 1) = std::numeric_limits<double>::quiet_NaN();
    ds.observed(1, 1) = 1;
    REQUIRE_THROWS_AS(save_dataset(ds, temp_dir("nan")), ValidationError);
  }
  SECTION("duplicate lattice position") {
    ds.spots[1].array_row = ds.spots[0].array_row;
    ds.spots[1].array_col = ds.spots[0].array_col;
    REQUIRE_THROWS_WITH(validate_dataset(ds), Catch::Matchers::ContainsSubstring("duplicate"));
  }
  SECTION("negative raw count") {
    ds.raw_counts(2, 2) = -3;
    REQUIRE_THROWS_WITH(validate_dataset(ds), Catch::Matchers::ContainsSubstring("negative raw count"));
  }
}

TEST_CASE("save to unwritable path raises IoError") {
  if (::geteuid() == 0) SUCCEED("running as root, permission bits are not enforced");
  else {
    fs::path dir = temp_dir("readonly");
    fs::permissions(dir, fs::perms::owner_read | fs::perms::owner_exec);
    REQUIRE_THROWS_AS(save_dataset(small_fixture(), dir / "sub"), IoError);
    fs::permissions(dir, fs::perms::owner_all);
    fs::remove_all(dir);
  }
}

TEST_CASE("generate_synthetic honors its contracts") {
  SECTION("dropout 0 leaves everything observed") {
    Dataset ds = generate_synthetic(1, 5, 5, 3, 0.0, 6.0, 123);
    REQUIRE(ds.observed.minCoeff() == 1);
  }
  SECTION("same seed is bit-identical") {
    Dataset a = generate_synthetic(2, 6, 5, 4, 0.3, 6.0, 7);
    Dataset b = generate_synthetic(2, 6, 5, 4, 0.3, 6.0, 7);
    REQUIRE(datasets_equal(a, b));
    Dataset c = generate_synthetic(2, 6, 5, 4, 0.3, 6.0, 8);
    REQUIRE(!datasets_equal(a, c));
  }
  SECTION("dropout fraction concentrates around the rate") {
    Dataset ds = generate_synthetic(2, 30, 30, 2, 0.3, 8.0, 4242);
    double missing = 0;
    for (Eigen::Index i = 0; i < ds.num_spots(); ++i)
      for (Eigen::Index j = 0; j < ds.num_genes(); ++j) missing += ds.observed(i, j) ? 0 : 1;
    double frac = missing / double(ds.num_spots() * ds.num_genes());
    REQUIRE(frac > 0.28);
    REQUIRE(frac < 0.32);
  }
  SECTION("splits round-robin") {
    Dataset two = generate_synthetic(2, 5, 5, 1, 0.0, 6.0, 1);
    REQUIRE(two.split.at("slide_0") == Split::train);
    REQUIRE(two.split.at("slide_1") == Split::val);
    Dataset four = generate_synthetic(4, 5, 5, 1, 0.0, 6.0, 1);
    REQUIRE(four.split.at("slide_2") == Split::test);
    REQUIRE(four.split.at("slide_3") == Split::train);
  }
  SECTION("invalid dimensions") {
    REQUIRE_THROWS_AS(generate_synthetic(1, 4, 4, 2, 0.0, 6.0, 1), ValidationError);
    REQUIRE_THROWS_AS(generate_synthetic(1, 5, 5, 0, 0.0, 6.0, 1), ValidationError);
    REQUIRE_THROWS_AS(generate_synthetic(1, 5, 5, 2, 1.0, 6.0, 1), ValidationError);
  }
}
