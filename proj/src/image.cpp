#include "dvfi/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "dvfi/error.hpp"

namespace dvfi {

Image::Image(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
  if (w <= 0 || h <= 0 || (c != 1 && c != 3)) throw ShapeError("image must be positive-sized with 1 or 3 channels");
}

void require_same_geometry(const Image& a, const Image& b, const char* op) {
  if (!a.same_geometry(b))
    throw ShapeError(std::string(op) + ": image size mismatch " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) +
                     "x" + std::to_string(b.height) + "x" + std::to_string(b.channels));
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path, const char* field) {
  const std::string tok = header_token(in);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad " + field + " '" + tok + "'");
  }
}

} // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string magic = header_token(in);
  int channels = 0;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw FormatError(path.string() + ": not a binary PGM/PPM (magic '" + magic + "')");
  const int w = header_int(in, path, "width");
  const int h = header_int(in, path, "height");
  const int maxval = header_int(in, path, "maxval");
  if (w <= 0 || h <= 0) throw FormatError(path.string() + ": non-positive size");
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  Image img(w, h, channels);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw FormatError(path.string() + ": truncated pixel data");
  return img;
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 1 && image.channels != 3) throw ShapeError("write_pnm: 1 or 3 channels required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data.data()), static_cast<std::streamsize>(image.data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Eigen::ArrayXXd luma(const Image& image) {
  Eigen::ArrayXXd y(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      if (image.channels == 1) y(r, c) = image.at(c, r);
      else y(r, c) = 0.299 * image.at(c, r, 0) + 0.587 * image.at(c, r, 1) + 0.114 * image.at(c, r, 2);
    }
  return y;
}

std::vector<Eigen::ArrayXXd> resize_planes(const Image& image, int width, int height) {
  if (width <= 0 || height <= 0) throw ShapeError("resize: non-positive target size");
  std::vector<Eigen::ArrayXXd> planes(image.channels, Eigen::ArrayXXd(height, width));
  const double sy = static_cast<double>(image.height) / height, sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, image.height - 1);
    const double ly = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, image.width - 1);
      const double lx = fx - x0;
      for (int c = 0; c < image.channels; ++c)
        planes[c](y, x) = (1 - ly) * ((1 - lx) * image.at(x0, y0, c) + lx * image.at(x1, y0, c)) +
                          ly * ((1 - lx) * image.at(x0, y1, c) + lx * image.at(x1, y1, c));
    }
  }
  return planes;
}

Image resize_bilinear(const Image& image, int width, int height) {
  const auto planes = resize_planes(image, width, height);
  Image out(width, height, image.channels);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < image.channels; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(planes[c](y, x)), 0L, 255L));
  return out;
}

} // namespace dvfi
