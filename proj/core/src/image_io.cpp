#include "fmn/image_io.hpp"

#include <cctype>
#include <string>

#include "fmn/binary_io.hpp"
#include "fmn/errors.hpp"

namespace fmn {

namespace {

std::vector<std::uint8_t> encode_netpbm(const char* magic, std::size_t height, std::size_t width,
                                        std::span<const std::uint8_t> pixels) {
  const std::string header =
      std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

class HeaderParser {
 public:
  explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string magic() {
    if (bytes_.size() < 2) throw ParseError("netpbm: truncated header");
    pos_ = 2;
    return std::string{static_cast<char>(bytes_[0]), static_cast<char>(bytes_[1])};
  }

  std::size_t number() {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) throw ParseError("netpbm: header value too large");
    }
    if (digits == 0) throw ParseError("netpbm: expected a number in header");
    return v;
  }

  /// Consumes the single whitespace byte that ends the header.
  std::size_t payload_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw ParseError("netpbm: malformed header");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Decoded {
  std::size_t height, width;
  std::vector<std::uint8_t> pixels;
};

Decoded decode_netpbm(std::span<const std::uint8_t> bytes, const char* magic, std::size_t channels) {
  HeaderParser p(bytes);
  if (p.magic() != magic) throw ParseError(std::string("netpbm: expected magic ") + magic);
  const std::size_t width = p.number();
  const std::size_t height = p.number();
  const std::size_t maxval = p.number();
  if (maxval != 255) throw ParseError("netpbm: only maxval 255 is supported");
  if (width == 0 || height == 0) throw ParseError("netpbm: empty image");
  const std::size_t offset = p.payload_offset();
  const std::size_t n = width * height * channels;
  if (bytes.size() - offset < n) throw ParseError("netpbm: truncated pixel data");
  return {height, width, std::vector<std::uint8_t>(bytes.begin() + offset, bytes.begin() + offset + n)};
}

template <typename Fn>
auto with_path(const std::filesystem::path& path, Fn fn) {
  try {
    return fn();
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  return encode_netpbm("P6", image.height, image.width, image.pixels);
}

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  auto d = decode_netpbm(bytes, "P6", 3);
  return {d.height, d.width, std::move(d.pixels)};
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  return encode_netpbm("P5", image.height, image.width, image.pixels);
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  auto d = decode_netpbm(bytes, "P5", 1);
  return {d.height, d.width, std::move(d.pixels)};
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) { io::write_file(path, encode_ppm(image)); }

RgbImage read_ppm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return with_path(path, [&] { return decode_ppm(bytes); });
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) { io::write_file(path, encode_pgm(image)); }

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return with_path(path, [&] { return decode_pgm(bytes); });
}

}  // namespace fmn
