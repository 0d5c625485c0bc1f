#include "spt/pgm.hpp"

#include <cmath>
#include <fstream>

#include "spt/errors.hpp"

namespace spt {

void write_pgm(const std::string& path, int64_t w, int64_t h, const std::vector<uint8_t>& bytes) {
  if (static_cast<int64_t>(bytes.size()) != w * h)
    fail(ErrorKind::dimension, "write_pgm: byte count does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "write_pgm: cannot open " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write_pgm: write failed for " + path);
}

namespace {

int read_pnm_token(std::istream& in, std::string& token) {
  token.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {  // comment to end of line
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    token.push_back(static_cast<char>(c));
    c = in.get();
  }
  return token.empty() ? EOF : 0;
}

}  // namespace

std::vector<uint8_t> read_pgm(const std::string& path, int64_t& w, int64_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "read_pgm: cannot open " + path);
  std::string tok;
  if (read_pnm_token(in, tok) == EOF || tok != "P5")
    fail(ErrorKind::io, "read_pgm: not a binary PGM (P5): " + path);
  auto next_int = [&](const char* what) {
    if (read_pnm_token(in, tok) == EOF) fail(ErrorKind::io, std::string("read_pgm: missing ") + what);
    return std::stoll(tok);
  };
  w = next_int("width");
  h = next_int("height");
  const int64_t maxval = next_int("maxval");
  if (w <= 0 || h <= 0 || maxval != 255)
    fail(ErrorKind::io, "read_pgm: unsupported dimensions or maxval in " + path);
  std::vector<uint8_t> bytes(static_cast<size_t>(w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    fail(ErrorKind::io, "read_pgm: truncated pixel data in " + path);
  return bytes;
}

std::vector<uint8_t> quantize_image(const std::vector<double>& values) {
  std::vector<uint8_t> bytes(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, values[i]));
    bytes[i] = static_cast<uint8_t>(std::llround(v * 255.0));
  }
  return bytes;
}

std::vector<double> dequantize_image(const std::vector<uint8_t>& bytes) {
  std::vector<double> values(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) values[i] = static_cast<double>(bytes[i]) / 255.0;
  return values;
}

void write_mask_pgm(const std::string& path, int64_t w, int64_t h,
                    const std::vector<uint8_t>& mask01) {
  std::vector<uint8_t> bytes(mask01.size());
  for (size_t i = 0; i < mask01.size(); ++i) bytes[i] = mask01[i] ? 255 : 0;
  write_pgm(path, w, h, bytes);
}

std::vector<uint8_t> read_mask_pgm(const std::string& path, int64_t& w, int64_t& h) {
  std::vector<uint8_t> bytes = read_pgm(path, w, h);
  for (uint8_t& b : bytes) {
    if (b != 0 && b != 255) fail(ErrorKind::io, "read_mask_pgm: non-binary value in " + path);
    b = b ? 1 : 0;
  }
  return bytes;
}

}  // namespace spt
