// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// File formats.
//
// Tensor / dense matrix binary, little-endian:
//   bytes 0-3   magic "FSMX"
//   bytes 4-5   rows (uint16)
//   bytes 6-7   cols (uint16)
//   then rows * cols float64 values, row-major.
//
// Images are written as 16-bit PGM with the linear map [-1, 1] -> [0, 65535]. Values
// outside [-1, 1] are clamped. Both binary (P5) and plain (P2) PGM are read.

#include "flowsolve/core.hpp"

#include <array>
#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace flowsolve {

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(detail::cat(what, " (at byte ", offset, ")")), message_(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 4> kTensorMagic = {'F', 'S', 'M', 'X'};
inline constexpr Index kTensorMaxExtent = 65535;

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(detail::cat("cannot open '", path.string(), "' for reading"));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open '", path.string(), "' for writing"));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(detail::cat("write to '", path.string(), "' failed"));
}

inline void put_u16_le(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline std::uint16_t get_u16_le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Matrix& m) {
  if (m.rows() > kTensorMaxExtent || m.cols() > kTensorMaxExtent)
    throw ShapeError(detail::cat("tensor of shape ", detail::shape_str(m.rows(), m.cols()),
                                 " exceeds the format limit of ", kTensorMaxExtent, " per axis"));
  std::vector<unsigned char> out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u16_le(out, static_cast<std::uint16_t>(m.rows()));
  detail::put_u16_le(out, static_cast<std::uint16_t>(m.cols()));
  out.reserve(out.size() + static_cast<std::size_t>(m.size()) * 8);
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint64_t>(m(r, c));
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  return out;
}

inline Matrix decode_tensor(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw ParseError("truncated tensor header", bytes.size());
  if (std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) throw ParseError("bad tensor magic", 0);
  const Index rows = detail::get_u16_le(bytes.data() + 4);
  const Index cols = detail::get_u16_le(bytes.data() + 6);
  const std::size_t expected = 8 + static_cast<std::size_t>(rows * cols) * 8;
  if (bytes.size() != expected)
    throw ParseError(detail::cat("tensor payload size mismatch for shape ", detail::shape_str(rows, cols),
                                 ": expected ", expected, " bytes, found ", bytes.size()),
                     std::min(bytes.size(), expected));
  Matrix m(rows, cols);
  const unsigned char* p = bytes.data() + 8;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c, p += 8) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
      m(r, c) = std::bit_cast<double>(bits);
    }
  return m;
}

inline void write_tensor(const std::filesystem::path& path, const Matrix& m) {
  detail::write_bytes(path, encode_tensor(m));
}

inline Matrix read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(detail::read_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(detail::cat(path.string(), ": ", e.message()), e.offset());
  }
}

inline std::uint16_t to_pixel(double v) {
  const double clamped = std::clamp(v, -1.0, 1.0);
  return static_cast<std::uint16_t>(std::lround((clamped + 1.0) * 0.5 * 65535.0));
}

inline double from_pixel(unsigned value, unsigned maxval) {
  return 2.0 * static_cast<double>(value) / static_cast<double>(maxval) - 1.0;
}

enum class PgmFormat { Binary, Plain };

inline std::vector<unsigned char> encode_pgm(const Matrix& image, PgmFormat format = PgmFormat::Binary) {
  std::ostringstream head;
  head << (format == PgmFormat::Binary ? "P5" : "P2") << "\n" << image.cols() << " " << image.rows() << "\n65535\n";
  const std::string h = head.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  for (Index r = 0; r < image.rows(); ++r) {
    for (Index c = 0; c < image.cols(); ++c) {
      const std::uint16_t px = to_pixel(image(r, c));
      if (format == PgmFormat::Binary) {
        out.push_back(static_cast<unsigned char>(px >> 8));
        out.push_back(static_cast<unsigned char>(px & 0xff));
      } else {
        const std::string s = std::to_string(px);
        out.insert(out.end(), s.begin(), s.end());
        out.push_back(c + 1 == image.cols() ? '\n' : ' ');
      }
    }
  }
  return out;
}

namespace detail {

class PgmScanner {
 public:
  explicit PgmScanner(const std::vector<unsigned char>& b) : b_(b) {}

  std::size_t pos() const noexcept { return pos_; }
  void advance(std::size_t n) noexcept { pos_ += n; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  unsigned long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    unsigned long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 0xffffffffUL) throw ParseError(detail::cat("PGM ", what, " is too large"), start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(detail::cat("expected PGM ", what), start);
    return v;
  }

 private:
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Matrix decode_pgm(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '2' && bytes[1] != '5'))
    throw ParseError("not a PGM file (expected magic P2 or P5)", 0);
  const bool binary = bytes[1] == '5';
  detail::PgmScanner scan(bytes);
  scan.advance(2);
  const unsigned long width = scan.number("width");
  const unsigned long height = scan.number("height");
  scan.skip_space_and_comments();
  const std::size_t maxval_at = scan.pos();
  const unsigned long maxval = scan.number("maxval");
  if (maxval == 0 || maxval > 65535) throw ParseError(detail::cat("PGM maxval ", maxval, " out of range"), maxval_at);
  Matrix image(static_cast<Index>(height), static_cast<Index>(width));
  if (binary) {
    if (scan.pos() >= bytes.size() || !std::isspace(bytes[scan.pos()]))
      throw ParseError("expected whitespace after PGM maxval", scan.pos());
    scan.advance(1);
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    const std::size_t need = width * height * bpp;
    if (bytes.size() - scan.pos() < need)
      throw ParseError(detail::cat("truncated PGM raster: need ", need, " bytes"), bytes.size());
    const unsigned char* p = bytes.data() + scan.pos();
    for (Index r = 0; r < image.rows(); ++r)
      for (Index c = 0; c < image.cols(); ++c, p += bpp) {
        const unsigned v = bpp == 2 ? (static_cast<unsigned>(p[0]) << 8) | p[1] : p[0];
        if (v > maxval) throw ParseError("PGM sample exceeds maxval", static_cast<std::size_t>(p - bytes.data()));
        image(r, c) = from_pixel(v, maxval);
      }
  } else {
    for (Index r = 0; r < image.rows(); ++r)
      for (Index c = 0; c < image.cols(); ++c) {
        scan.skip_space_and_comments();
        const std::size_t at = scan.pos();
        const unsigned long v = scan.number("sample");
        if (v > maxval) throw ParseError("PGM sample exceeds maxval", at);
        image(r, c) = from_pixel(static_cast<unsigned>(v), static_cast<unsigned>(maxval));
      }
  }
  return image;
}

inline void write_pgm(const std::filesystem::path& path, const Matrix& image, PgmFormat format = PgmFormat::Binary) {
  detail::write_bytes(path, encode_pgm(image, format));
}

inline Matrix read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(detail::read_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(detail::cat(path.string(), ": ", e.message()), e.offset());
  }
}

}  // namespace flowsolve
