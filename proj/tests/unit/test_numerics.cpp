#include <gtest/gtest.h>

#include <set>
#include <thread>

#include "metamd/errors.hpp"
#include "metamd/io.hpp"
#include "metamd/numerics.hpp"
#include "metamd/parallel.hpp"
#include "metamd/rng.hpp"

using namespace metamd;

TEST(Rng, SameSeedAndStreamReplay) {
  RngStream a(42, 3), b(42, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DistinctStreamsDiffer) {
  RngStream a(42, 0), b(42, 1);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(Rng, CounterAdvancesPerDraw) {
  RngStream r(0, 0);
  const std::uint64_t first = r.next_u64();
  RngStream again(0, 0);
  EXPECT_EQ(first, again.next_u64());
  EXPECT_EQ(r.counter(), 1u);
}

TEST(Rng, SplitIsPureAndDoesNotAdvance) {
  RngStream r(9, 0);
  const auto before = r.counter();
  RngStream c1 = r.split(5), c2 = r.split(5), c3 = r.split(6);
  EXPECT_EQ(r.counter(), before);
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  EXPECT_NE(c1.stream_id(), c3.stream_id());
}

TEST(Rng, UniformRangeAndIndexBounds) {
  RngStream r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.uniform_index(7), 7u);
  }
}

TEST(Rng, UniformIndexCoversAllValues) {
  RngStream r(2);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(r.uniform_index(5));
  EXPECT_EQ(seen.size(), 5u);
}

TEST(SampleGaussian, ZeroVarianceReturnsMean) {
  RngStream r(3);
  const Vector out = sample_gaussian(r, Vector::Zero(2), Vector::Zero(2));
  EXPECT_EQ(out, Vector::Zero(2));
}

TEST(SampleGaussian, DeterministicReplay) {
  RngStream a(11), b(11);
  const Vector mean = Vector::Ones(2), sd = Vector::Ones(2);
  EXPECT_EQ(sample_gaussian(a, mean, sd), sample_gaussian(b, mean, sd));
}

TEST(SampleGaussian, Moments) {
  RngStream r(2024);
  const int n = 10000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = sample_gaussian(r, Vector::Zero(1), Vector::Ones(1))[0];
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(SampleGaussian, Errors) {
  RngStream r(1);
  EXPECT_THROW(sample_gaussian(r, Vector::Zero(2), Vector::Zero(3)), ArgumentError);
  EXPECT_THROW(sample_gaussian(r, Vector::Zero(1), Vector::Constant(1, -1.0)), ArgumentError);
}

TEST(Matvec, Examples) {
  EXPECT_EQ(matvec(Matrix::Identity(2, 2), Vector::Map(std::vector<double>{3, 4}.data(), 2)),
            (Vector(2) << 3, 4).finished());
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  EXPECT_EQ(matvec(a, Vector::Ones(2)), (Vector(2) << 3, 7).finished());
  EXPECT_EQ(matvec(Matrix::Zero(3, 2), Vector::Ones(2)), Vector::Zero(3));
  EXPECT_THROW(matvec(a, Vector::Ones(3)), ArgumentError);
}

TEST(Matvec, Linearity) {
  RngStream r(5);
  Matrix a(50, 50);
  Vector x(50), y(50);
  for (int i = 0; i < 50; ++i) {
    x[i] = r.normal();
    y[i] = r.normal();
    for (int j = 0; j < 50; ++j) a(i, j) = r.normal();
  }
  const Vector lhs = matvec(a, x + y);
  const Vector rhs = matvec(a, x) + matvec(a, y);
  for (int i = 0; i < 50; ++i) EXPECT_LE(std::abs(lhs[i] - rhs[i]), 1e-12 * std::max(1.0, std::abs(rhs[i])));
}

TEST(Norm2, Examples) {
  EXPECT_EQ(norm2((Vector(2) << 3, 4).finished()), 5.0);
  EXPECT_EQ(norm2(Vector::Zero(3)), 0.0);
  EXPECT_EQ(norm2(Vector::Ones(4)), 2.0);
}

TEST(Symmetry, Tolerance) {
  Matrix a(2, 2);
  a << 1, 2, 2 + 1e-13, 1;
  EXPECT_TRUE(is_symmetric(a));
  a(1, 0) = 2.1;
  EXPECT_FALSE(is_symmetric(a));
}

TEST(RowMajor, RoundTrip) {
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  const auto flat = row_major(a);
  EXPECT_EQ(flat, (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(from_row_major(flat, 2, 3), a);
  EXPECT_THROW(from_row_major(flat, 4, 2), ArgumentError);
}

TEST(Io, FormatDoubleRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.9}) EXPECT_EQ(std::stod(io::format_double(x)), x);
}

TEST(Io, ByteReaderReportsOffsets) {
  io::ByteReader r(std::string_view("ABC", 3));
  r.expect("AB", "magic");
  try {
    r.le<std::uint32_t>("field");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 2u);
  }
}

TEST(Parallel, ResultsIndependentOfWorkerCount) {
  std::vector<double> one(64), many(64);
  auto work = [](std::vector<double>& out) {
    return [&out](std::size_t i) {
      RngStream r = RngStream(7).split(i);
      out[i] = r.normal();
    };
  };
  parallel_for(64, 1, work(one));
  parallel_for(64, 8, work(many));
  EXPECT_EQ(one, many);
}

TEST(Parallel, RethrowsLowestIndexError) {
  try {
    parallel_for(10, 4, [](std::size_t i) {
      if (i == 3 || i == 7) throw std::runtime_error("fail " + std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "fail 3");
  }
}
