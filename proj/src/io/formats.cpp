#include "pidg/io/formats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pidg/common/error.hpp"

namespace pidg::io {
namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::filesystem::path& path, const char* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw FormatError("write failed for " + path.string());
}

// Parses "P5"/"P6" headers: magic, width, height, maxval, one whitespace byte.
std::size_t netpbm_header(const std::vector<char>& buf, const char* magic, int& w, int& h,
                          const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) t += buf[pos++];
    return t;
  };
  if (token() != magic) throw FormatError(path.string() + ": expected " + magic);
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0) throw FormatError(path.string() + ": bad size");
  return pos + 1;
}

}  // namespace

void ByteWriter::bytes(const void* data, std::size_t n) {
  const char* p = static_cast<const char*>(data);
  buf_.insert(buf_.end(), p, p + n);
}
void ByteWriter::u32(std::uint32_t v) { bytes(&v, 4); }
void ByteWriter::u64(std::uint64_t v) { bytes(&v, 8); }
void ByteWriter::f32(float v) { bytes(&v, 4); }
void ByteWriter::f64(double v) { bytes(&v, 8); }
void ByteWriter::str(const std::string& s) {
  u64(s.size());
  bytes(s.data(), s.size());
}
void ByteWriter::save(const std::filesystem::path& path) const { spit(path, buf_.data(), buf_.size()); }

ByteReader ByteReader::load(const std::filesystem::path& path) { return ByteReader(slurp(path)); }
void ByteReader::bytes(void* out, std::size_t n) {
  if (buf_.size() - pos_ < n) throw FormatError("unexpected end of data");
  std::memcpy(out, buf_.data() + pos_, n);
  pos_ += n;
}
std::uint8_t ByteReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}
std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  bytes(&v, 4);
  return v;
}
std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  bytes(&v, 8);
  return v;
}
float ByteReader::f32() {
  float v;
  bytes(&v, 4);
  return v;
}
double ByteReader::f64() {
  double v;
  bytes(&v, 8);
  return v;
}
std::string ByteReader::str() {
  const std::uint64_t n = u64();
  if (n > buf_.size() - pos_) throw FormatError("string length exceeds data");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (double v : image.rgb) out += static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  spit(path, out.data(), out.size());
}

Image read_ppm(const std::filesystem::path& path) {
  const std::vector<char> buf = slurp(path);
  int w = 0, h = 0;
  const std::size_t start = netpbm_header(buf, "P6", w, h, path);
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  if (buf.size() < start + n) throw FormatError(path.string() + ": truncated pixel data");
  Image img(w, h);
  for (std::size_t i = 0; i < n; ++i) img.rgb[i] = static_cast<std::uint8_t>(buf[start + i]) / 255.0;
  return img;
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  for (std::uint8_t b : mask.bits) out += static_cast<char>(b ? 255 : 0);
  spit(path, out.data(), out.size());
}

Mask read_pgm(const std::filesystem::path& path) {
  const std::vector<char> buf = slurp(path);
  int w = 0, h = 0;
  const std::size_t start = netpbm_header(buf, "P5", w, h, path);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (buf.size() < start + n) throw FormatError(path.string() + ": truncated pixel data");
  Mask m(w, h);
  for (std::size_t i = 0; i < n; ++i) m.bits[i] = static_cast<std::uint8_t>(buf[start + i]) >= 128 ? 1 : 0;
  return m;
}

void write_flow(const std::filesystem::path& path, const flow::FlowField& f) {
  ByteWriter w;
  w.bytes(kFlowMagic, 8);
  w.u32(static_cast<std::uint32_t>(f.width));
  w.u32(static_cast<std::uint32_t>(f.height));
  for (double v : f.uv) w.f32(static_cast<float>(v));
  w.bytes(f.valid.data(), f.valid.size());
  w.save(path);
}

flow::FlowField read_flow(const std::filesystem::path& path) {
  ByteReader r = ByteReader::load(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kFlowMagic, 8) != 0) throw FormatError(path.string() + ": not a PIDGFLO1 file");
  const int w = static_cast<int>(r.u32()), h = static_cast<int>(r.u32());
  flow::FlowField f(w, h);
  for (double& v : f.uv) v = r.f32();
  r.bytes(f.valid.data(), f.valid.size());
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
  return f;
}

void write_depth(const std::filesystem::path& path, const DepthMap& d) {
  ByteWriter w;
  w.bytes(kDepthMagic, 8);
  w.u32(static_cast<std::uint32_t>(d.width));
  w.u32(static_cast<std::uint32_t>(d.height));
  for (double v : d.depth) w.f64(v);
  w.save(path);
}

DepthMap read_depth(const std::filesystem::path& path) {
  ByteReader r = ByteReader::load(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kDepthMagic, 8) != 0) throw FormatError(path.string() + ": not a PIDGDEP1 file");
  const int w = static_cast<int>(r.u32()), h = static_cast<int>(r.u32());
  DepthMap d(w, h);
  for (double& v : d.depth) v = r.f64();
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
  return d;
}

nlohmann::json camera_to_json(const render::Camera& c) {
  nlohmann::json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  std::vector<double> r, t;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) r.push_back(c.rotation(a, b));
    t.push_back(c.translation[a]);
  }
  j["rotation"] = r;
  j["translation"] = t;
  return j;
}

render::Camera camera_from_json(const nlohmann::json& j) {
  try {
    render::Camera c;
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw FormatError("camera rotation/translation sizes");
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) c.rotation(a, b) = r[static_cast<std::size_t>(a * 3 + b)];
      c.translation[a] = t[static_cast<std::size_t>(a)];
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("camera JSON: ") + e.what());
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::string s = j.dump(2) + "\n";
  spit(path, s.data(), s.size());
}

}  // namespace pidg::io
