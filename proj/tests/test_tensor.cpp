#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "usseg/npy.hpp"
#include "usseg/rng.hpp"
#include "usseg/shape.hpp"
#include "usseg/tensor.hpp"

using namespace usseg;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("shape basics") {
  Shape s{2, 3, 4};
  CHECK(s.rank() == 3);
  CHECK(s.numel() == 24);
  CHECK(s.stride(0) == 12);
  CHECK(s.stride(1) == 4);
  CHECK(s.stride(2) == 1);
  CHECK(s.str() == "(2, 3, 4)");
  CHECK(s == Shape{2, 3, 4});
  CHECK(s != Shape{2, 3, 5});

  CHECK_THROWS_AS(Shape{0}, std::invalid_argument);
  CHECK_THROWS_AS((Shape{1, -2}), std::invalid_argument);
  CHECK_THROWS_AS((Shape{1, 2, 3, 4, 5, 6}), std::invalid_argument);
  CHECK_THROWS_AS(Shape(std::span<const std::int64_t>{}), std::invalid_argument);
}

TEST_CASE("rng streams are reproducible and independent") {
  RngStream a(42, 7);
  RngStream b(42, 7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(42, 8);
  RngStream d(43, 7);
  int same_c = 0, same_d = 0;
  RngStream a2(42, 7);
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t r = a2.next_u64();
    same_c += (r == c.next_u64());
    same_d += (r == d.next_u64());
  }
  CHECK(same_c == 0);
  CHECK(same_d == 0);
}

TEST_CASE("rng derive is stable and keyed") {
  RngStream root(1, 0);
  RngStream x = root.derive("cases", 3);
  RngStream y = root.derive("cases", 3);
  CHECK(x.next_u64() == y.next_u64());
  RngStream z = root.derive("cases", 4);
  CHECK(x.next_u64() != z.next_u64());
  // deriving does not advance the parent
  RngStream root2(1, 0);
  (void)root.derive(11);
  CHECK(root.next_u64() == root2.next_u64());
}

TEST_CASE("rng distributions behave") {
  RngStream r(7, 0);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));

  double m = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = r.normal();
    m += g;
    m2 += g * g;
  }
  m /= n;
  m2 /= n;
  CHECK(std::abs(m) < 0.03);
  CHECK(std::sqrt(m2 - m * m) == doctest::Approx(1.0).epsilon(0.03));

  for (int i = 0; i < 1000; ++i) {
    const std::int64_t v = r.uniform_int(13);
    CHECK(v >= 0);
    CHECK(v < 13);
  }
  CHECK_THROWS_AS(r.uniform_int(0), std::invalid_argument);
}

TEST_CASE("tensor storage and views") {
  Tensor t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.sum64() == 0.0);
  t.at(1, 2) = 5.0f;
  CHECK(t[5] == 5.0f);

  Tensor u = t.reshaped(Shape{6});
  CHECK(u.at(5) == 5.0f);
  CHECK_THROWS_AS(t.reshaped(Shape{7}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(Shape{2}, std::vector<float>{1.f, 2.f, 3.f}), std::invalid_argument);

  Tensor v(Shape{3}, {1.f, 2.f, 3.f});
  CHECK(v.sum64() == 6.0);
  CHECK(v.mean64() == 2.0);
  CHECK(v.min() == 1.0f);
  CHECK(v.max() == 3.0f);
  CHECK(v.equals(Tensor(Shape{3}, {1.f, 2.f, 3.f})));
  CHECK_FALSE(v.equals(Tensor(Shape{3}, {1.f, 2.f, 4.f})));
  CHECK(v.all_finite());
  v[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(v.all_finite());
}

TEST_CASE("npy round trip") {
  const fs::path dir = fs::temp_directory_path() / "usseg_npy_test";
  fs::create_directories(dir);

  RngStream rng(3, 1);
  for (const Shape& s : {Shape{7}, Shape{2, 3}, Shape{1, 4, 8, 8, 2}}) {
    Tensor t = Tensor::uniform(s, rng, -2.0f, 2.0f);
    const fs::path p = dir / "t.npy";
    npy::save(p, t);
    Tensor back = npy::load<float>(p);
    CHECK(back.shape() == t.shape());
    CHECK(back.equals(t));
  }

  TensorD d(Shape{3}, std::vector<double>{0.25, -1.5, 9.0});
  npy::save(dir / "d.npy", d);
  Tensor asf = npy::load<float>(dir / "d.npy");
  CHECK(asf[0] == 0.25f);
  CHECK(asf[2] == 9.0f);

  CHECK_THROWS_AS(npy::load<float>(dir / "missing.npy"), npy::Error);
  fs::remove_all(dir);
}

TEST_CASE("npy header matches the reference layout") {
  // Golden bytes produced by numpy.save for float32 arange(6).reshape(2,3).
  static const unsigned char ref[] = {
      0x93, 'N',  'U',  'M',  'P',  'Y',  0x01, 0x00, 0x76, 0x00, '{',  '\'', 'd',  'e',  's',  'c',
      'r',  '\'', ':',  ' ',  '\'', '<',  'f',  '4',  '\'', ',',  ' ',  '\'', 'f',  'o',  'r',  't',
      'r',  'a',  'n',  '_',  'o',  'r',  'd',  'e',  'r',  '\'', ':',  ' ',  'F',  'a',  'l',  's',
      'e',  ',',  ' ',  '\'', 's',  'h',  'a',  'p',  'e',  '\'', ':',  ' ',  '(',  '2',  ',',  ' ',
      '3',  ')',  ',',  ' ',  '}',
  };
  const fs::path dir = fs::temp_directory_path() / "usseg_npy_golden";
  fs::create_directories(dir);
  Tensor t(Shape{2, 3}, {0.f, 1.f, 2.f, 3.f, 4.f, 5.f});
  npy::save(dir / "g.npy", t);

  std::ifstream in(dir / "g.npy", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 128 + 24);  // 64-byte-aligned header + 6 floats
  for (std::size_t i = 0; i < sizeof(ref); ++i) CHECK(bytes[i] == ref[i]);
  for (std::size_t i = sizeof(ref); i < 127; ++i) CHECK(bytes[i] == ' ');
  CHECK(bytes[127] == '\n');
  fs::remove_all(dir);
}

TEST_SUITE_END();
