#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pmqve/distill.hpp"
#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/tensor.hpp"

namespace pmqve {

inline constexpr std::array<unsigned char, 4> kTensorMagic{0x50, 0x4D, 0x51, 0x54};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::size_t kTensorHeaderBytes = 4 + 4 + 1 + 1 + 2;
inline constexpr int kBoundsVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error("write failed for '" + path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot rename into '" + path.string() + "'");
  }
}

// ---- tensor files ----

/// Values are stored as 32-bit floats; anything not representable as a
/// finite float is rejected rather than silently rounded to infinity.
inline std::string encode_tensor(const Tensor& t) {
  if (t.empty()) throw Error("cannot serialize an empty tensor");
  if (t.rank() > 255) throw Error("tensor rank exceeds 255");
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le<std::uint32_t>(out, kTensorVersion);
  out.push_back(static_cast<char>(kDtypeF32));
  out.push_back(static_cast<char>(t.rank()));
  detail::put_le<std::uint16_t>(out, 0);
  for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  out.reserve(out.size() + 4 * t.size());
  for (double v : t.values()) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) throw Error("value out of 32-bit float range");
    detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Tensor decode_tensor(const std::string& bytes) {
  if (bytes.size() < 4 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin(),
                                      [](unsigned char m, char b) { return m == static_cast<unsigned char>(b); })) {
    throw Error("not a PMQT file");
  }
  if (bytes.size() < kTensorHeaderBytes) throw Error("size mismatch: truncated header");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kTensorVersion) throw Error("unsupported version " + std::to_string(version));
  const auto dtype = static_cast<unsigned char>(bytes[8]);
  if (dtype != kDtypeF32) throw Error("unsupported dtype " + std::to_string(dtype));
  const auto ndim = static_cast<unsigned char>(bytes[9]);
  if (ndim == 0) throw Error("size mismatch: zero-rank tensor");
  const std::size_t dims_end = kTensorHeaderBytes + 8 * static_cast<std::size_t>(ndim);
  if (bytes.size() < dims_end) throw Error("size mismatch: truncated dimensions");

  Shape shape;
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const auto d = detail::get_le<std::uint64_t>(bytes, kTensorHeaderBytes + 8 * i);
    if (d == 0) throw Error("size mismatch: zero extent");
    if (count > (std::uint64_t{1} << 60) / d) throw Error("size mismatch: element count overflows");
    count *= d;
    shape.push_back(static_cast<std::size_t>(d));
  }
  if (bytes.size() - dims_end != 4 * count) {
    throw Error("size mismatch: payload has " + std::to_string(bytes.size() - dims_end) + " bytes, expected " +
                std::to_string(4 * count));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, dims_end + 4 * i));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_atomic(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(detail::read_file(path));
  } catch (const Error& e) {
    const std::string msg = e.what();
    if (msg.find(path.string()) != std::string::npos) throw;
    throw Error(path.string() + ": " + msg);
  }
}

// ---- bounds files ----

namespace detail {

/// 17 significant digits; round-trips every finite double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string json_string(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

inline std::string encode_bounds(const SchemeSet& schemes) {
  std::ostringstream o;
  o << "{\n  \"version\": " << kBoundsVersion << ",\n  \"sites\": [";
  bool first_site = true;
  for (const auto& [name, s] : schemes) {
    o << (first_site ? "\n" : ",\n");
    first_site = false;
    o << "    {\"name\": " << detail::json_string(name) << ", \"bits\": " << s.bits()
      << ", \"per_frame\": " << (s.per_frame() ? "true" : "false") << ", \"bounds\": [";
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& p = s.params()[i];
      o << (i ? ", " : "") << "{\"lb\": " << detail::format_double(p.lb())
        << ", \"ub\": " << detail::format_double(p.ub()) << "}";
    }
    o << "]}";
  }
  o << "\n  ]\n}\n";
  return o.str();
}

inline SchemeSet decode_bounds(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("bounds file is not valid JSON: ") + e.what());
  }
  try {
    if (!doc.is_object()) throw Error("bounds file must be an object");
    if (doc.at("version").get<int>() != kBoundsVersion) {
      throw Error("unsupported bounds version " + doc.at("version").dump());
    }
    SchemeSet out;
    for (const auto& site : doc.at("sites")) {
      const auto name = site.at("name").get<std::string>();
      const int bits = site.at("bits").get<int>();
      const bool per_frame = site.at("per_frame").get<bool>();
      std::vector<QuantParams> params;
      for (const auto& b : site.at("bounds")) {
        params.emplace_back(b.at("lb").get<double>(), b.at("ub").get<double>(), bits);
      }
      if (!per_frame && params.size() != 1) {
        throw Error("site '" + name + "': per-tensor site needs exactly one bounds entry");
      }
      if (!out.emplace(name, FrameQuantScheme(name, per_frame, std::move(params))).second) {
        throw Error("duplicate site '" + name + "'");
      }
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed bounds file: ") + e.what());
  }
}

inline void write_bounds(const std::filesystem::path& path, const SchemeSet& schemes) {
  write_file_atomic(path, encode_bounds(schemes));
}

inline SchemeSet read_bounds(const std::filesystem::path& path) {
  try {
    return decode_bounds(detail::read_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

// ---- loss logs ----

inline nlohmann::json to_json(const LossReport& r) {
  nlohmann::json teachers = nlohmann::json::array();
  for (std::size_t i = 0; i < r.teachers.size(); ++i) {
    teachers.push_back({{"label", r.teachers[i]}, {"l_rec", r.l_rec.at(i)}, {"l_feat", r.l_feat.at(i)}});
  }
  return {{"step", r.step}, {"alpha", r.alpha}, {"l_int", r.l_int},
          {"l_fp", r.l_fp},  {"l_pmtd", r.l_pmtd}, {"teachers", teachers}};
}

inline LossReport loss_report_from_json(const nlohmann::json& j) {
  LossReport r;
  r.step = j.at("step").get<std::size_t>();
  r.alpha = j.at("alpha").get<double>();
  r.l_int = j.at("l_int").get<double>();
  r.l_fp = j.at("l_fp").get<double>();
  r.l_pmtd = j.at("l_pmtd").get<double>();
  for (const auto& t : j.at("teachers")) {
    r.teachers.push_back(t.at("label").get<std::string>());
    r.l_rec.push_back(t.at("l_rec").get<double>());
    r.l_feat.push_back(t.at("l_feat").get<double>());
  }
  return r;
}

/// One JSON object per line.
inline std::string encode_log(const std::vector<LossReport>& log) {
  std::string out;
  for (const auto& r : log) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<LossReport> decode_log(const std::string& text) {
  std::vector<LossReport> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(loss_report_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_log(const std::filesystem::path& path, const std::vector<LossReport>& log) {
  write_file_atomic(path, encode_log(log));
}

inline std::vector<LossReport> read_log(const std::filesystem::path& path) {
  return decode_log(detail::read_file(path));
}

}  // namespace pmqve
