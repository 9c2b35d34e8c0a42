#include "gnr/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gnr/error.hpp"

namespace gnr {

namespace {

unsigned char to_byte(double v) {
  const double c = std::clamp(v, -1.0, 1.0);
  return static_cast<unsigned char>(std::lround((c + 1.0) * 0.5 * 255.0));
}

}  // namespace

Tensor read_png(const std::filesystem::path& path, int channels) {
  if (channels < 1 || channels > 4) throw ArgumentError("read_png: channels must be 1..4");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IngestionError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGBA;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IngestionError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Tensor out({channels, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < channels; ++c) {
      // Single-channel reads take the gray value from the red plane.
      const png_byte b = buf[p * 4 + static_cast<std::size_t>(c)];
      out[static_cast<std::size_t>(c) * plane + p] = b / 255.0 * 2.0 - 1.0;
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image, int upscale) {
  if (image.rank() != 3) throw ArgumentError("write_png expects a (C, H, W) tensor");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != 1 && c != 3 && c != 4) throw ArgumentError("write_png supports 1, 3 or 4 channels");
  if (upscale < 1) throw ArgumentError("write_png: upscale must be >= 1");
  const int H = h * upscale, W = w * upscale;
  std::vector<png_byte> buf(static_cast<std::size_t>(H) * W * c);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t src = static_cast<std::size_t>(y / upscale) * w + x / upscale;
      for (int k = 0; k < c; ++k) {
        buf[(static_cast<std::size_t>(y) * W + x) * c + k] = to_byte(image[static_cast<std::size_t>(k) * plane + src]);
      }
    }
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = c == 1 ? PNG_FORMAT_GRAY : c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw IngestionError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

Tensor tile_grid(const std::vector<Tensor>& panels, int columns, int pad) {
  if (panels.empty()) throw ArgumentError("tile_grid: no panels");
  const Tensor& first = panels.front();
  const int c = first.dim(0), h = first.dim(1), w = first.dim(2);
  for (const Tensor& p : panels) require_same_shape(p, first, "tile_grid");
  columns = std::clamp(columns, 1, static_cast<int>(panels.size()));
  const int rows = (static_cast<int>(panels.size()) + columns - 1) / columns;
  const int H = rows * h + (rows + 1) * pad, W = columns * w + (columns + 1) * pad;
  Tensor out({c, H, W}, 1.0);
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const int r = static_cast<int>(i) / columns, q = static_cast<int>(i) % columns;
    const int y0 = pad + r * (h + pad), x0 = pad + q * (w + pad);
    for (int k = 0; k < c; ++k) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          out[(static_cast<std::size_t>(k) * H + y0 + y) * W + x0 + x] =
              panels[i][(static_cast<std::size_t>(k) * h + y) * w + x];
        }
      }
    }
  }
  return out;
}

void write_norm_curves_svg(std::ostream& out, const std::vector<StepDiagnostics>& diagnostics) {
  constexpr double width = 640, height = 360, margin = 48;
  std::vector<double> cfg, grad;
  for (const StepDiagnostics& d : diagnostics) {
    cfg.push_back(d.cfg_norm_sq > 0 ? std::log10(d.cfg_norm_sq) : NAN);
    grad.push_back(d.guider_grad_norm_sq > 0 ? std::log10(d.guider_grad_norm_sq) : NAN);
  }
  double lo = 1e300, hi = -1e300;
  for (const auto* series : {&cfg, &grad}) {
    for (double v : *series) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (lo > hi) lo = hi = 0.0;
  if (hi - lo < 1e-9) {
    lo -= 1.0;
    hi += 1.0;
  }
  const std::size_t n = diagnostics.size();
  auto px = [&](std::size_t i) { return margin + (n > 1 ? (width - 2 * margin) * i / (n - 1) : 0.0); };
  auto py = [&](double v) { return height - margin - (height - 2 * margin) * (v - lo) / (hi - lo); };
  auto polyline = [&](const std::vector<double>& s, const char* color) {
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::isfinite(s[i])) out << px(i) << ',' << py(s[i]) << ' ';
    }
    out << "\"/>\n";
  };
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
      << height - margin << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << height - margin
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << margin << "\" y=\"" << margin - 12 << "\" font-size=\"12\">log10 squared norm ("
      << lo << " .. " << hi << ")</text>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"" << height - 12 << "\" font-size=\"12\">step (t = T .. 1)</text>\n";
  polyline(cfg, "#1f77b4");
  polyline(grad, "#d62728");
  out << "<text x=\"" << width - margin - 140 << "\" y=\"" << margin + 4
      << "\" font-size=\"12\" fill=\"#1f77b4\">CFG delta</text>\n";
  out << "<text x=\"" << width - margin - 140 << "\" y=\"" << margin + 20
      << "\" font-size=\"12\" fill=\"#d62728\">guider gradient</text>\n";
  out << "</svg>\n";
}

}  // namespace gnr
