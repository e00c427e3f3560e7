#include "insetopt/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace insetopt {

namespace {

std::array<std::uint32_t, 256> crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t n = 0; n < 256; ++n) {
    std::uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    table[n] = c;
  }
  return table;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0) {
  static const auto table = crc_table();
  crc ^= 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

std::uint32_t adler32(const std::uint8_t* data, std::size_t len) {
  std::uint32_t a = 1, b = 0;
  for (std::size_t i = 0; i < len; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

void push_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back((x >> 24) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[4],
                const std::vector<std::uint8_t>& payload) {
  push_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.insert(out.end(), body.begin(), body.end());
  push_u32(out, crc32(body.data(), body.size()));
}

// zlib stream of stored (uncompressed) deflate blocks
std::vector<std::uint8_t> zlib_stored(const std::vector<std::uint8_t>& raw) {
  std::vector<std::uint8_t> z = {0x78, 0x01};
  std::size_t pos = 0;
  do {
    const std::size_t len = std::min<std::size_t>(raw.size() - pos, 65535);
    const bool final = pos + len == raw.size();
    z.push_back(final ? 1 : 0);
    z.push_back(len & 0xff);
    z.push_back((len >> 8) & 0xff);
    z.push_back(~len & 0xff);
    z.push_back((~len >> 8) & 0xff);
    z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + len);
    pos += len;
  } while (pos < raw.size());
  push_u32(z, adler32(raw.data(), raw.size()));
  return z;
}

}  // namespace

void write_png(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw std::invalid_argument("write_png: expected [1,h,w] or [3,h,w], got " +
                                shape_str(img.shape()));
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * c));
  for (int i = 0; i < h; ++i) {
    raw.push_back(0);  // filter: none
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(img.data()[ch * plane + i * w + j], 0.0, 1.0);
        raw.push_back(static_cast<std::uint8_t>(std::lround(255.0 * v)));
      }
  }

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  push_u32(ihdr, static_cast<std::uint32_t>(w));
  push_u32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                      // bit depth
  ihdr.push_back(c == 1 ? 0 : 2);         // grayscale / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", zlib_stored(raw));
  push_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

void write_raw_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write("F64T", 4);
  const std::int32_t rank = t.rank();
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int d : t.shape()) {
    const std::int32_t dim = d;
    f.write(reinterpret_cast<const char*>(&dim), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data().data()),
          static_cast<std::streamsize>(sizeof(double) * t.numel()));
}

Tensor read_raw_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "F64T", 4) != 0) throw std::runtime_error(path + ": not a raw tensor");
  std::int32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  Shape shape(rank);
  for (auto& d : shape) {
    std::int32_t dim = 0;
    f.read(reinterpret_cast<char*>(&dim), 4);
    d = dim;
  }
  Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.data().data()),
         static_cast<std::streamsize>(sizeof(double) * t.numel()));
  if (!f) throw std::runtime_error(path + ": truncated raw tensor");
  return t;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<double>>& rows,
               const std::vector<std::string>& header_comments) {
  std::ostringstream os;
  for (const auto& line : header_comments) os << "# " << line << "\n";
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << "\n";
  for (const auto& row : rows) {
    if (row.size() != columns.size())
      throw std::invalid_argument("write_csv: row width does not match header");
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_double(row[i]);
    os << "\n";
  }
  write_text_file(path, os.str());
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace insetopt
