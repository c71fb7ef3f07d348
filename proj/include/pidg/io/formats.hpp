#pragma once

#include <filesystem>
#include <json.hpp>
#include <vector>

#include "pidg/common/image.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/render/camera.hpp"

namespace pidg::io {

inline constexpr char kFlowMagic[8] = {'P', 'I', 'D', 'G', 'F', 'L', 'O', '1'};
inline constexpr char kDepthMagic[8] = {'P', 'I', 'D', 'G', 'D', 'E', 'P', '1'};

// Binary PPM (P6), 8 bits per channel. Values are clamped to [0,1] and rounded.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Binary PGM (P5) holding 0 or 255.
void write_pgm(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm(const std::filesystem::path& path);

// "PIDGFLO1", u32 width, u32 height, row-major f32 (du, dv) pairs, row-major
// u8 validity. Little-endian.
void write_flow(const std::filesystem::path& path, const flow::FlowField& flow);
flow::FlowField read_flow(const std::filesystem::path& path);

// "PIDGDEP1", u32 width, u32 height, row-major f64 depths. Little-endian.
void write_depth(const std::filesystem::path& path, const DepthMap& depth);
DepthMap read_depth(const std::filesystem::path& path);

nlohmann::json camera_to_json(const render::Camera& camera);
render::Camera camera_from_json(const nlohmann::json& j);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// Little-endian primitive encoding shared by the binary formats.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n);
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);
  const std::vector<char>& data() const { return buf_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : buf_(std::move(data)) {}
  static ByteReader load(const std::filesystem::path& path);
  void bytes(void* out, std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace pidg::io
