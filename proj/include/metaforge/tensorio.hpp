#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaforge/errors.hpp"
#include "metaforge/matrix.hpp"
#include "metaforge/tensor.hpp"

namespace metaforge::io {

inline constexpr int kFormatVersion = 1;

struct TensorHeader {
  Dtype dtype = Dtype::f64;
  std::vector<std::size_t> shape;
  bool fortran_order = false;
};

// ---------------------------------------------------------------------------
// Byte helpers. Everything on disk is little-endian regardless of host.

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into '" + path.string() + "'");
  }
}

// ---------------------------------------------------------------------------
// NPY v1.0

namespace detail {

// Parser for the python-literal dict in an NPY header.
class HeaderParser {
 public:
  explicit HeaderParser(std::string_view s) : s_(s) {}

  TensorHeader parse() {
    TensorHeader h;
    bool have_descr = false, have_order = false, have_shape = false;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      const std::string key = parse_string();
      expect(':');
      if (key == "descr") {
        h.dtype = parse_descr(parse_string());
        have_descr = true;
      } else if (key == "fortran_order") {
        h.fortran_order = parse_bool();
        have_order = true;
      } else if (key == "shape") {
        h.shape = parse_shape();
        have_shape = true;
      } else {
        fail("unexpected key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    expect('}');
    if (!have_descr || !have_order || !have_shape) fail("missing descr, fortran_order or shape");
    return h;
  }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw ValidationError("malformed NPY header: " + why);
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string parse_string() {
    skip_ws();
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected string");
    ++pos_;
    const auto end = s_.find(q, pos_);
    if (end == std::string_view::npos) fail("unterminated string");
    std::string out(s_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return out;
  }
  bool parse_bool() {
    skip_ws();
    if (s_.substr(pos_, 4) == "True") { pos_ += 4; return true; }
    if (s_.substr(pos_, 5) == "False") { pos_ += 5; return false; }
    fail("expected True or False");
  }
  std::vector<std::size_t> parse_shape() {
    expect('(');
    std::vector<std::size_t> shape;
    while (true) {
      skip_ws();
      if (peek() == ')') break;
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("expected dimension");
      std::size_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) v = v * 10 + static_cast<std::size_t>(s_[pos_++] - '0');
      // numpy writes 'L' suffixes in very old files
      if (peek() == 'L') ++pos_;
      shape.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    expect(')');
    return shape;
  }
  static Dtype parse_descr(const std::string& d) {
    if (d == "<f8") return Dtype::f64;
    if (d == "<f4") return Dtype::f32;
    if (!d.empty() && d.find('O') != std::string::npos)
      throw ValidationError("NPY object arrays (pickled payloads) are not supported");
    throw ValidationError("unsupported NPY dtype '" + d + "' (need '<f4' or '<f8')");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline TensorHeader parse_npy_header(std::string_view dict) {
  return detail::HeaderParser(dict).parse();
}

/// Parses an in-memory NPY v1.0 file.
inline Tensor decode_npy(const std::string& bytes) {
  static constexpr char kMagic[] = "\x93NUMPY";
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0)
    throw ValidationError("bad NPY magic bytes");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  if (u[6] != 1) throw ValidationError("unsupported NPY version " + std::to_string(u[6]) + "." + std::to_string(u[7]) + " (only 1.0)");
  const std::size_t hlen = get_le(u + 8, 2);
  if (bytes.size() < 10 + hlen) throw ValidationError("truncated NPY header");
  const TensorHeader h = parse_npy_header(std::string_view(bytes).substr(10, hlen));
  if (h.fortran_order) throw ValidationError("fortran_order NPY arrays are not supported");
  const std::size_t n = Tensor::count(h.shape);
  const std::size_t width = h.dtype == Dtype::f64 ? 8 : 4;
  const std::size_t expected = n * width;
  const std::size_t actual = bytes.size() - 10 - hlen;
  if (actual < expected)
    throw ValidationError("truncated NPY payload: expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(actual));
  std::vector<double> data(n);
  const unsigned char* p = u + 10 + hlen;
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 8) {
      data[i] = std::bit_cast<double>(get_le(p + 8 * i, 8));
    } else {
      data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * i, 4)));
    }
  }
  return Tensor(h.shape, std::move(data), h.dtype);
}

inline std::string encode_npy(const Tensor& t) {
  const bool f64 = t.dtype == Dtype::f64;
  std::string dict = std::string("{'descr': '") + (f64 ? "<f8" : "<f4") +
                     "', 'fortran_order': False, 'shape': " + t.shape_string() + ", }";
  // Pad so magic+version+len+dict+'\n' is a multiple of 64.
  const std::size_t total = 10 + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  put_le(out, dict.size(), 2);
  out += dict;
  out.reserve(out.size() + t.data.size() * (f64 ? 8 : 4));
  for (double v : t.data) {
    if (f64) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    else put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  return out;
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_npy(bytes);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_atomic(path, encode_npy(t));
}

inline void save_matrix(const RealMatrix& m, const std::filesystem::path& path) {
  save_tensor(Tensor::from_matrix(m), path);
}

inline RealMatrix load_matrix(const std::filesystem::path& path) { return load_tensor(path).to_matrix(); }

// ---------------------------------------------------------------------------
// Netpbm / PFM

/// One or three linear-intensity channels.
struct Image {
  std::vector<RealMatrix> channels;
};

/// Binary PGM/PPM (P5/P6). Values are normalized to [0,1] and de-gamma'd with exponent 2.2.
inline Image decode_pnm(const std::string& bytes, double gamma = 2.2) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      else if (bytes[pos] == '#') while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else break;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t.push_back(bytes[pos++]);
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw ValidationError("unsupported image format '" + magic + "' (need binary PGM/PPM)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ValidationError("malformed PGM/PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ValidationError("bad PGM/PPM dimensions or maxval");
  ++pos;  // single whitespace before raster
  const std::size_t nc = magic == "P5" ? 1 : 3;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos + w * h * nc * bps) throw ValidationError("truncated PGM/PPM raster");
  Image img;
  img.channels.assign(nc, RealMatrix(h, w));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t c = 0; c < nc; ++c) {
      const std::size_t k = (i * nc + c) * bps;
      const double v = bps == 2 ? (p[k] << 8 | p[k + 1]) : p[k];
      img.channels[c][i] = std::pow(v / static_cast<double>(maxval), gamma);
    }
  }
  return img;
}

/// Linear, max-normalized 8-bit PGM preview.
inline std::string encode_pgm_preview(const RealMatrix& m, unsigned maxval = 255) {
  std::string out = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n" +
                    std::to_string(maxval) + "\n";
  double peak = 0.0;
  for (double v : m) peak = std::max(peak, v);
  for (double v : m) {
    const double x = peak > 0.0 ? std::clamp(v / peak, 0.0, 1.0) : 0.0;
    const auto q = static_cast<unsigned>(std::lround(x * maxval));
    if (maxval > 255) {
      out.push_back(static_cast<char>(q >> 8));
      out.push_back(static_cast<char>(q & 0xff));
    } else {
      out.push_back(static_cast<char>(q));
    }
  }
  return out;
}

/// Grayscale PFM (little-endian, bottom row first).
inline std::string encode_pfm(const RealMatrix& m) {
  std::string out = "Pf\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n-1.0\n";
  for (std::size_t r = m.rows(); r-- > 0;)
    for (std::size_t c = 0; c < m.cols(); ++c)
      put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))), 4);
  return out;
}

// ---------------------------------------------------------------------------
// JSON / CSV

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  write_file_atomic(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

/// Columns of unequal length are padded with empty cells.
inline std::string encode_csv(const std::vector<std::string>& header,
                              const std::vector<std::vector<double>>& columns) {
  std::ostringstream ss;
  ss.precision(17);
  for (std::size_t i = 0; i < header.size(); ++i) ss << (i ? "," : "") << header[i];
  ss << "\n";
  std::size_t rows = 0;
  for (const auto& c : columns) rows = std::max(rows, c.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (i) ss << ",";
      if (r < columns[i].size()) ss << columns[i][r];
    }
    ss << "\n";
  }
  return ss.str();
}

}  // namespace metaforge::io
