#include "terra/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace terra {

namespace {

void skip_ws_and_comments(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

struct PnmHeader {
  int w = 0, h = 0, maxval = 0;
};

PnmHeader read_header(std::istream& in, const char* magic, const std::string& path) {
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != magic[0] || m1 != magic[1])
    throw ArtifactError(cat("'", path, "' is not a ", magic, " file"));
  PnmHeader h;
  skip_ws_and_comments(in);
  in >> h.w;
  skip_ws_and_comments(in);
  in >> h.h;
  skip_ws_and_comments(in);
  in >> h.maxval;
  in.get();  // single whitespace before raster
  if (!in || h.w <= 0 || h.h <= 0 || h.maxval != 255)
    throw ArtifactError(cat("unsupported or corrupt header in '", path, "'"));
  return h;
}

std::uint8_t quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  require(image.ndim() == 3 && image.dim(0) == 3, "write_ppm expects [3,H,W], got ",
          shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(cat("cannot open '", path, "' for writing"));
  out << "P6\n" << w << " " << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  const double* px = image.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + c] =
            quantize(px[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x]);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw ArtifactError(cat("failed writing '", path, "'"));
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(cat("cannot open image '", path, "'"));
  const PnmHeader hd = read_header(in, "P6", path);
  const std::size_t plane = static_cast<std::size_t>(hd.h) * hd.w;
  std::vector<std::uint8_t> raw(plane * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw ArtifactError(cat("truncated image '", path, "'"));
  std::vector<double> data(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      data[static_cast<std::size_t>(c) * plane + i] =
          static_cast<double>(raw[i * 3 + static_cast<std::size_t>(c)]) / 255.0;
  return Tensor::from_data({3, hd.h, hd.w}, std::move(data));
}

void write_pgm(const std::string& path, const LabelMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError(cat("cannot open '", path, "' for writing"));
  out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.labels.data()),
            static_cast<std::streamsize>(mask.labels.size()));
  if (!out) throw ArtifactError(cat("failed writing '", path, "'"));
}

LabelMask read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(cat("cannot open mask '", path, "'"));
  const PnmHeader hd = read_header(in, "P5", path);
  LabelMask m = make_mask(hd.h, hd.w);
  in.read(reinterpret_cast<char*>(m.labels.data()),
          static_cast<std::streamsize>(m.labels.size()));
  if (!in) throw ArtifactError(cat("truncated mask '", path, "'"));
  return m;
}

}  // namespace terra
