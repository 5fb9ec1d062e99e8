#include "cdet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "cdet/error.hpp"

namespace cdet {
namespace {

// Next whitespace-separated token, skipping '#' comments.
bool next_token(std::istream& is, std::string& tok) {
  tok.clear();
  char ch = 0;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(is, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch)) != 0) {
      if (!tok.empty()) {
        return true;
      }
      continue;
    }
    tok.push_back(ch);
  }
  return !tok.empty();
}

int next_int(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  if (!next_token(is, tok)) {
    throw IoError("image: unexpected end of file in '" + path.string() + "'");
  }
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) {
      throw std::invalid_argument(tok);
    }
    return v;
  } catch (const std::exception&) {
    throw IoError("image: bad token '" + tok + "' in '" + path.string() + "'");
  }
}

}  // namespace

Image::Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw IoError("image: cannot write '" + path.string() + "'");
  }
  os << "P2\n" << image.width << ' ' << image.height << "\n255\n";
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      os << static_cast<int>(image.at(x, y)) << (x + 1 == image.width ? '\n' : ' ');
    }
  }
  if (!os) {
    throw IoError("image: write failed for '" + path.string() + "'");
  }
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("image: cannot open '" + path.string() + "'");
  }
  std::string magic;
  if (!next_token(is, magic) || (magic != "P2" && magic != "P3")) {
    throw IoError("image: '" + path.string() + "' is not a plain PGM/PPM file");
  }
  const int w = next_int(is, path);
  const int h = next_int(is, path);
  const int maxval = next_int(is, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw IoError("image: bad header in '" + path.string() + "'");
  }
  const int channels = magic == "P3" ? 3 : 1;
  Image img(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    int acc = 0;
    for (int c = 0; c < channels; ++c) {
      const int v = next_int(is, path);
      if (v < 0 || v > maxval) {
        throw IoError("image: sample out of range in '" + path.string() + "'");
      }
      acc += v;
    }
    const double gray = static_cast<double>(acc) / channels * 255.0 / maxval;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(gray));
  }
  return img;
}

Tensor to_tensor(const Image& image) {
  Tensor t(Shape{1, image.height, image.width});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    t[i] = static_cast<double>(image.pixels[i]) / 255.0 - 0.5;
  }
  return t;
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      out.at(x, y) = image.at(image.width - 1 - x, y);
    }
  }
  return out;
}

Image resample(const Image& image, double x0, double y0, double w, double h, int out_w,
               int out_h) {
  Image out(out_w, out_h);
  const double sx = w / out_w;
  const double sy = h / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int iy = std::min(static_cast<int>(fy), image.height - 1);
    const int iy1 = std::min(iy + 1, image.height - 1);
    const double ty = fy - iy;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int ix = std::min(static_cast<int>(fx), image.width - 1);
      const int ix1 = std::min(ix + 1, image.width - 1);
      const double tx = fx - ix;
      const double v = (1 - ty) * ((1 - tx) * image.at(ix, iy) + tx * image.at(ix1, iy)) +
                       ty * ((1 - tx) * image.at(ix, iy1) + tx * image.at(ix1, iy1));
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

}  // namespace cdet
