#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <vector>

#include "pmqve/io.hpp"
#include "pmqve/rng.hpp"

using namespace pmqve;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pmqve_io_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string expect_error(const std::string& bytes) {
  try {
    decode_tensor(bytes);
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "decode succeeded";
  return "";
}

Tensor random_f32_tensor(SplitMix64& rng) {
  Shape shape(1 + rng.below(4));
  for (auto& d : shape) d = 1 + rng.below(5);
  std::vector<double> v(shape_product(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal(0, 100));
  return Tensor(shape, v);
}

}  // namespace

TEST(TensorFile, OneByOneLayout) {
  const std::string b = encode_tensor(Tensor({1, 1}, {1.0}));
  ASSERT_EQ(b.size(), 12u + 16u + 4u);
  EXPECT_EQ(b.substr(0, 4), "PMQT");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 0);
  EXPECT_EQ(b[9], 2);
  EXPECT_EQ(b[12], 1);
  EXPECT_EQ(b[20], 1);
  float f;
  std::memcpy(&f, b.data() + 28, 4);
  EXPECT_EQ(f, 1.0f);
}

TEST(TensorFile, RoundTripsExactlyForFloatValues) {
  SplitMix64 rng(77);
  for (int i = 0; i < 50; ++i) {
    const Tensor t = random_f32_tensor(rng);
    const Tensor back = decode_tensor(encode_tensor(t));
    EXPECT_EQ(back.shape(), t.shape());
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_EQ(back[k], t[k]);
  }
}

TEST(TensorFile, RejectsUnrepresentable) {
  EXPECT_THROW(encode_tensor(Tensor({1}, {1e300})), Error);
  EXPECT_THROW(encode_tensor(Tensor()), Error);
}

TEST(TensorFile, MalformedInputs) {
  const std::string good = encode_tensor(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(expect_error("PMQ"), "not a PMQT file");
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_EQ(expect_error(bad), "not a PMQT file");
  EXPECT_NE(expect_error(good.substr(0, 10)).find("size mismatch"), std::string::npos);
  EXPECT_NE(expect_error(good.substr(0, 20)).find("size mismatch"), std::string::npos);
  EXPECT_NE(expect_error(good.substr(0, good.size() - 1)).find("size mismatch"), std::string::npos);
  EXPECT_NE(expect_error(good + "x").find("size mismatch"), std::string::npos);
  bad = good;
  bad[4] = 2;
  EXPECT_EQ(expect_error(bad), "unsupported version 2");
  bad = good;
  bad[8] = 1;
  EXPECT_EQ(expect_error(bad), "unsupported dtype 1");
  bad = good;
  bad[12] = 0;
  EXPECT_NE(expect_error(bad).find("zero extent"), std::string::npos);
}

TEST(TensorFile, ReadErrorsNameThePath) {
  const auto p = scratch("missing.pmqt");
  fs::remove(p);
  try {
    read_tensor(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
}

TEST(TensorFile, AtomicWriteLeavesNoTemp) {
  const auto p = scratch("t.pmqt");
  write_tensor(p, Tensor({2}, {0.5, -0.25}));
  EXPECT_TRUE(fs::exists(p));
  auto tmp = p;
  tmp += ".tmp";
  EXPECT_FALSE(fs::exists(tmp));
  EXPECT_EQ(read_tensor(p)[1], -0.25);
}

TEST(BoundsFile, RoundTripsFullPrecision) {
  SchemeSet s;
  s.emplace("a", FrameQuantScheme("a", true, {QuantParams(0.1, 1.0 / 3.0, 4), QuantParams(-1e-17, 2.718281828459045, 4)}));
  s.emplace("b.weight", FrameQuantScheme("b.weight", false, {QuantParams(-0.30000000000000004, 0.7, 8)}));
  const SchemeSet back = decode_bounds(encode_bounds(s));
  EXPECT_EQ(back, s);
  const auto p = scratch("bounds.json");
  write_bounds(p, s);
  EXPECT_EQ(read_bounds(p), s);
}

TEST(BoundsFile, Malformed) {
  EXPECT_THROW(decode_bounds("{"), Error);
  EXPECT_THROW(decode_bounds("[]"), Error);
  EXPECT_THROW(decode_bounds(R"({"version": 2, "sites": []})"), Error);
  EXPECT_THROW(decode_bounds(R"({"version": 1})"), Error);
  EXPECT_THROW(decode_bounds(
                   R"({"version": 1, "sites": [{"name": "a", "bits": 4, "per_frame": false, "bounds": [{"lb": 0, "ub": 1}, {"lb": 0, "ub": 1}]}]})"),
               Error);
  EXPECT_THROW(decode_bounds(
                   R"({"version": 1, "sites": [{"name": "a", "bits": 4, "per_frame": false, "bounds": [{"lb": 1, "ub": 0}]}]})"),
               Error);
  try {
    decode_bounds(R"({"version": 1, "sites": [
      {"name": "a", "bits": 4, "per_frame": false, "bounds": [{"lb": 0, "ub": 1}]},
      {"name": "a", "bits": 4, "per_frame": false, "bounds": [{"lb": 0, "ub": 1}]}]})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate site"), std::string::npos);
  }
}

TEST(LogFile, RoundTrip) {
  std::vector<LossReport> log(3);
  for (std::size_t i = 0; i < log.size(); ++i) {
    auto& r = log[i];
    r.step = i;
    r.alpha = 0.1 * static_cast<double>(i);
    r.l_int = 1.0 / 3.0 + static_cast<double>(i);
    r.l_fp = 0.2;
    r.teachers = {"8bit", "fp"};
    r.l_rec = {0.5, 0.25};
    r.l_feat = {1e-9, 2.5};
    r.l_pmtd = pmtd_objective(r.l_int, r.l_fp, r.alpha);
  }
  const auto back = decode_log(encode_log(log));
  ASSERT_EQ(back.size(), log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(back[i].step, log[i].step);
    EXPECT_EQ(back[i].alpha, log[i].alpha);
    EXPECT_EQ(back[i].l_int, log[i].l_int);
    EXPECT_EQ(back[i].l_pmtd, log[i].l_pmtd);
    EXPECT_EQ(back[i].teachers, log[i].teachers);
    EXPECT_EQ(back[i].l_rec, log[i].l_rec);
    EXPECT_EQ(back[i].l_feat, log[i].l_feat);
  }
  const std::string text = encode_log(log);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_THROW(decode_log("{not json}\n"), Error);
}
