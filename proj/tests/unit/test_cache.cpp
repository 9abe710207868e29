// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "oofkd/cache.hpp"
#include "oofkd/random.hpp"

using namespace oofkd;

namespace {

struct Fixture {
  FoldPlan plan;
  Matrix probs;
};

Fixture make_fixture(std::size_t n = 40, std::size_t C = 3) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % C);
  Fixture f{make_folds(y, 5, 11), Matrix(n, C)};
  Rng rng(2);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (auto& v : f.probs.row(i)) s += (v = rng.uniform() + 1e-3);
    for (auto& v : f.probs.row(i)) v /= s;
  }
  return f;
}

std::string render(const Fixture& f) {
  std::ostringstream out;
  write_cache(out, f.probs, f.plan, "ds", "t");
  return out.str();
}

std::string error_of(const std::string& text, const FoldPlan* plan = nullptr) {
  std::istringstream in(text);
  try {
    read_cache(in, plan);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

std::string replace_line(const std::string& text, std::size_t line_no, const std::string& repl) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  for (std::size_t i = 0; std::getline(in, line); ++i) out << (i == line_no ? repl : line) << '\n';
  return out.str();
}

constexpr std::size_t kHeaderLines = 9;  // eight comment lines and the column header

}  // namespace

TEST(Cache, RoundTripWithinNineDigits) {
  const auto f = make_fixture();
  std::istringstream in(render(f));
  const auto c = read_cache(in, &f.plan);
  EXPECT_EQ(c.meta.dataset, "ds");
  EXPECT_EQ(c.meta.teacher, "t");
  EXPECT_EQ(c.meta.n, 40u);
  EXPECT_EQ(c.meta.c, 3);
  EXPECT_EQ(c.meta.k, 5);
  EXPECT_EQ(c.meta.fold_plan_hash, f.plan.hash_hex());
  EXPECT_EQ(c.folds, f.plan.assignment);
  for (std::size_t v = 0; v < f.probs.values().size(); ++v) EXPECT_NEAR(c.probs.values()[v], f.probs.values()[v], 1e-9);
}

TEST(Cache, IdenticalInputsGiveIdenticalBytes) {
  const auto f = make_fixture();
  EXPECT_EQ(render(f), render(f));
  std::istringstream in(render(f));
  const auto c = read_cache(in);
  std::ostringstream again;
  write_cache(again, c.probs, f.plan, "ds", "t");
  EXPECT_EQ(again.str(), render(f));
}

TEST(Cache, HeaderLayout) {
  const auto text = render(make_fixture(10, 2));
  EXPECT_EQ(text.rfind("# format=oofkd-cache\n# version=1\n# dataset=ds\n# teacher=t\n# n=10\n# c=2\n# k=5\n", 0), 0u);
  EXPECT_NE(text.find("\nrow,fold,p0,p1\n0,"), std::string::npos);
}

TEST(Cache, RejectsRowsOffTheSimplex) {
  const auto f = make_fixture();
  const auto text = replace_line(render(f), kHeaderLines + 7, "7," + std::to_string(f.plan.assignment[7]) + ",0.3,0.3,0.3");
  const auto err = error_of(text);
  EXPECT_NE(err.find("row 7"), std::string::npos) << err;
  EXPECT_NE(err.find("sum"), std::string::npos) << err;
  const auto neg = replace_line(render(f), kHeaderLines + 3, "3," + std::to_string(f.plan.assignment[3]) + ",-0.1,0.6,0.5");
  EXPECT_NE(error_of(neg).find("row 3"), std::string::npos);
}

TEST(Cache, RejectsAForeignFoldPlan) {
  const auto f = make_fixture();
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = static_cast<int>(i % 3);
  const auto other = make_folds(y, 5, 12);
  ASSERT_NE(other.hash_hex(), f.plan.hash_hex());
  const auto err = error_of(render(f), &other);
  EXPECT_NE(err.find("fold_plan_hash"), std::string::npos) << err;
  EXPECT_EQ(error_of(render(f), &f.plan), "");
}

TEST(Cache, RejectsMissingRows) {
  const auto f = make_fixture();
  const auto text = replace_line(render(f), kHeaderLines + 17, "");
  const auto err = error_of(text);
  EXPECT_NE(err.find("missing row 17"), std::string::npos) << err;
}

TEST(Cache, RejectsDuplicateRowsAndWrongFolds) {
  const auto f = make_fixture();
  const auto text = render(f);
  const auto dup = replace_line(text, kHeaderLines + 5, "4," + std::to_string(f.plan.assignment[4]) + ",0.2,0.3,0.5");
  EXPECT_NE(error_of(dup).find("duplicate row 4"), std::string::npos);
  const int wrong = (f.plan.assignment[9] + 1) % 5;
  const auto moved = replace_line(text, kHeaderLines + 9, "9," + std::to_string(wrong) + ",0.2,0.3,0.5");
  EXPECT_EQ(error_of(moved), "");
  EXPECT_NE(error_of(moved, &f.plan).find("row 9 is in fold"), std::string::npos);
}

TEST(Cache, RejectsShapeAndVersionMismatch) {
  const auto f = make_fixture();
  const auto text = render(f);
  const auto short_rec = replace_line(text, kHeaderLines + 2, "2,0,0.5,0.5");
  EXPECT_NE(error_of(short_rec).find("fields"), std::string::npos);
  const auto bad_cols = replace_line(text, 8, "row,fold,p0,p1");
  EXPECT_NE(error_of(bad_cols).find("column header"), std::string::npos);
  const auto v2 = replace_line(text, 1, "# version=2");
  EXPECT_NE(error_of(v2).find("version"), std::string::npos);
  EXPECT_NE(error_of("row,fold,p0,p1\n").find("format"), std::string::npos);
  std::vector<int> y(41);
  for (std::size_t i = 0; i < 41; ++i) y[i] = static_cast<int>(i % 3);
  EXPECT_THROW(write_cache(std::cout, f.probs, make_folds(y, 5, 1), "ds", "t"), Error);
}

TEST(Cache, FileHelpers) {
  EXPECT_THROW(read_cache_file("/nonexistent/dir/cache.csv"), Error);
}
