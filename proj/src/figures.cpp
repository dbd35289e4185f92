#include "cfaudit/figures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"

namespace cfaudit::figures {

namespace {

// Rows top to bottom, three columns each.
const std::unordered_map<char, const char*>& font() {
  static const std::unordered_map<char, const char*> glyphs = {
      {'0', "111101101101111"}, {'1', "010110010010111"}, {'2', "111001111100111"}, {'3', "111001111001111"},
      {'4', "101101111001001"}, {'5', "111100111001111"}, {'6', "111100111101111"}, {'7', "111001001001001"},
      {'8', "111101111101111"}, {'9', "111101111001111"}, {'A', "010101111101101"}, {'B', "110101110101110"},
      {'C', "011100100100011"}, {'D', "110101101101110"}, {'E', "111100110100111"}, {'F', "111100110100100"},
      {'G', "011100101101011"}, {'H', "101101111101101"}, {'I', "111010010010111"}, {'J', "001001001101010"},
      {'K', "101101110101101"}, {'L', "100100100100111"}, {'M', "101111111101101"}, {'N', "110101101101101"},
      {'O', "010101101101010"}, {'P', "110101110100100"}, {'Q', "010101101110011"}, {'R', "110101110101101"},
      {'S', "011100010001110"}, {'T', "111010010010010"}, {'U', "101101101101111"}, {'V', "101101101101010"},
      {'W', "101101111111101"}, {'X', "101101010101101"}, {'Y', "101101010010010"}, {'Z', "111001010100111"},
      {'.', "000000000000010"}, {'-', "000000111000000"}, {'=', "000111000111000"}, {':', "000010000010000"},
      {'_', "000000000000111"}, {'(', "001010010010001"}, {')', "100010010010100"}, {'/', "001001010100100"},
      {'+', "000010111010000"}, {',', "000000000010100"}, {'%', "101001010100101"}, {'|', "010010010010010"},
      {'<', "001010100010001"}, {'>', "100010001010100"}, {'[', "110100100100110"}, {']', "011001001001011"},
  };
  return glyphs;
}

std::string format(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

Color palette(std::size_t index) {
  static const std::vector<Color> colors = {{0.12f, 0.47f, 0.71f}, {1.0f, 0.5f, 0.05f},  {0.17f, 0.63f, 0.17f},
                                            {0.84f, 0.15f, 0.16f}, {0.58f, 0.4f, 0.74f}, {0.55f, 0.34f, 0.29f},
                                            {0.89f, 0.47f, 0.76f}, {0.5f, 0.5f, 0.5f}};
  return colors[index % colors.size()];
}

Canvas::Canvas(std::int64_t width, std::int64_t height, Color background) : width_(width), height_(height) {
  if (width < 1 || height < 1) throw ArgumentError("canvas needs a positive size");
  pixels_ = torch::empty({3, height, width});
  for (int c = 0; c < 3; ++c) pixels_[c].fill_(background[static_cast<std::size_t>(c)]);
}

void Canvas::set(std::int64_t x, std::int64_t y, Color color) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  auto* data = pixels_.data_ptr<float>();
  for (std::int64_t c = 0; c < 3; ++c) data[(c * height_ + y) * width_ + x] = color[static_cast<std::size_t>(c)];
}

void Canvas::fill_rect(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h, Color color) {
  for (std::int64_t j = y; j < y + h; ++j)
    for (std::int64_t i = x; i < x + w; ++i) set(i, j, color);
}

void Canvas::rect_outline(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h, Color color) {
  line(x, y, x + w - 1, y, color);
  line(x, y + h - 1, x + w - 1, y + h - 1, color);
  line(x, y, x, y + h - 1, color);
  line(x + w - 1, y, x + w - 1, y + h - 1, color);
}

void Canvas::line(std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1, Color color) {
  const std::int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const std::int64_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  std::int64_t err = dx + dy;
  while (true) {
    set(x0, y0, color);
    if (x0 == x1 && y0 == y1) break;
    const auto e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

std::int64_t text_width(std::string_view text, std::int64_t scale) {
  return text.empty() ? 0 : static_cast<std::int64_t>(text.size()) * 4 * scale - scale;
}

void Canvas::text(std::int64_t x, std::int64_t y, std::string_view text, Color color, std::int64_t scale) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
    const auto it = font().find(ch);
    if (it == font().end()) continue;
    const auto ox = x + static_cast<std::int64_t>(i) * 4 * scale;
    for (int row = 0; row < 5; ++row)
      for (int col = 0; col < 3; ++col)
        if (it->second[row * 3 + col] == '1') fill_rect(ox + col * scale, y + row * scale, scale, scale, color);
  }
}

void Canvas::blit(const torch::Tensor& image, std::int64_t x, std::int64_t y, std::int64_t scale) {
  auto img = image.detach().to(torch::kFloat32).clamp(0, 1);
  if (img.dim() == 2) img = img.unsqueeze(0);
  if (img.dim() != 3) throw ArgumentError("blit needs a [C,H,W] or [H,W] image");
  if (img.size(0) == 1) img = img.expand({3, img.size(1), img.size(2)});
  img = img.contiguous();
  const auto a = img.accessor<float, 3>();
  for (std::int64_t j = 0; j < img.size(1); ++j)
    for (std::int64_t i = 0; i < img.size(2); ++i)
      fill_rect(x + i * scale, y + j * scale, scale, scale, {a[0][j][i], a[1][j][i], a[2][j][i]});
}

void Canvas::save(const std::filesystem::path& path) const { io::write_png(path, pixels_); }

Canvas image_strip(const std::vector<torch::Tensor>& panels, const std::vector<std::string>& captions,
                   std::int64_t scale) {
  if (panels.empty()) throw ArgumentError("strip needs at least one panel");
  if (captions.size() != panels.size()) throw ArgumentError("one caption per panel required");
  auto shape = panels.front().sizes().vec();
  const auto h = shape.back() == 0 ? 0 : shape[shape.size() - 2], w = shape.back();
  const std::int64_t pad = 4, caption = 9;
  Canvas canvas(static_cast<std::int64_t>(panels.size()) * (w * scale + pad) + pad, h * scale + caption + 2 * pad);
  for (std::size_t i = 0; i < panels.size(); ++i) {
    if (panels[i].sizes().vec() != shape) throw ArgumentError("strip panels must share one shape");
    const auto x = pad + static_cast<std::int64_t>(i) * (w * scale + pad);
    canvas.blit(panels[i], x, pad, scale);
    const auto tw = text_width(captions[i]);
    canvas.text(x + std::max<std::int64_t>(0, (w * scale - tw) / 2), pad + h * scale + 3, captions[i], kBlack);
  }
  return canvas;
}

Canvas line_chart(const std::vector<Series>& series, std::string_view title, bool unit_axes, std::int64_t width,
                  std::int64_t height) {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!unit_axes) {
    x0 = y0 = std::numeric_limits<double>::infinity();
    x1 = y1 = -std::numeric_limits<double>::infinity();
    for (const auto& s : series) {
      for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
      for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x1 = x0 + 1;
    if (y1 - y0 < 1e-12) y1 = y0 + 1;
  }
  Canvas c(width, height);
  const std::int64_t left = 30, top = 16, right = 10, bottom = 20 + 8 * static_cast<std::int64_t>(series.size());
  const auto pw = width - left - right, ph = height - top - bottom;
  c.text(left, 4, title, kBlack);
  c.rect_outline(left, top, pw, ph, kBlack);
  c.text(2, top, format(y1), kBlack);
  c.text(2, top + ph - 5, format(y0), kBlack);
  c.text(left, top + ph + 3, format(x0), kBlack);
  c.text(left + pw - text_width(format(x1)), top + ph + 3, format(x1), kBlack);
  auto px = [&](double v) { return left + static_cast<std::int64_t>(std::lround((v - x0) / (x1 - x0) * (pw - 1))); };
  auto py = [&](double v) {
    return top + ph - 1 - static_cast<std::int64_t>(std::lround((v - y0) / (y1 - y0) * (ph - 1)));
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto color = palette(k);
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      c.fill_rect(px(s.x[i]) - 1, py(s.y[i]) - 1, 3, 3, color);
      if (i > 0) c.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), color);
    }
    const auto ly = top + ph + 12 + 8 * static_cast<std::int64_t>(k);
    c.fill_rect(left, ly, 6, 5, color);
    c.text(left + 10, ly, s.name, kBlack);
  }
  return c;
}

Canvas bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                 const std::vector<double>& errors, std::string_view title, std::int64_t width) {
  if (labels.size() != values.size() || (!errors.empty() && errors.size() != values.size()))
    throw ArgumentError("bar chart needs one label (and error) per value");
  std::int64_t label_w = 0;
  for (const auto& l : labels) label_w = std::max(label_w, text_width(l));
  double extent = 1e-12;
  for (std::size_t i = 0; i < values.size(); ++i)
    extent = std::max(extent, std::abs(values[i]) + (errors.empty() ? 0.0 : std::abs(errors[i])));
  const std::int64_t row = 12, top = 16, left = label_w + 8, right = 40;
  Canvas c(std::max(width, left + right + 60), top + row * static_cast<std::int64_t>(values.size()) + 8);
  c.text(4, 4, title, kBlack);
  const auto pw = c.width() - left - right;
  const auto zero = left + pw / 2;
  c.line(zero, top - 2, zero, c.height() - 4, kGrey);
  auto px = [&](double v) { return zero + static_cast<std::int64_t>(std::lround(v / extent * (pw / 2 - 1))); };
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto y = top + static_cast<std::int64_t>(i) * row;
    c.text(4, y + 2, labels[i], kBlack);
    const auto a = std::min(zero, px(values[i])), b = std::max(zero, px(values[i]));
    c.fill_rect(a, y, std::max<std::int64_t>(1, b - a), row - 3, palette(0));
    if (!errors.empty()) {
      const auto lo = px(values[i] - errors[i]), hi = px(values[i] + errors[i]);
      c.line(lo, y + (row - 3) / 2, hi, y + (row - 3) / 2, kBlack);
    }
    c.text(zero + pw / 2 + 4, y + 2, format(values[i], 3), kBlack);
  }
  return c;
}

Canvas scatter_chart(const torch::Tensor& points, const std::vector<std::int64_t>& groups, const torch::Tensor& path,
                     std::string_view title, std::int64_t size) {
  if (points.dim() != 2 || points.size(1) != 2) throw ArgumentError("scatter needs [N, 2] points");
  if (!groups.empty() && static_cast<std::int64_t>(groups.size()) != points.size(0))
    throw ArgumentError("one group per point required");
  auto all = points.to(torch::kFloat64);
  if (path.defined() && path.numel() > 0) all = torch::cat({all, path.to(torch::kFloat64).reshape({-1, 2})});
  const auto lo = std::get<0>(all.min(0)), hi = std::get<0>(all.max(0));
  const double x0 = lo[0].item<double>(), y0 = lo[1].item<double>();
  const double span = std::max({hi[0].item<double>() - x0, hi[1].item<double>() - y0, 1e-9});
  const std::int64_t pad = 16;
  Canvas c(size, size);
  c.text(4, 4, title, kBlack);
  const auto inner = size - 2 * pad;
  auto px = [&](double v) { return pad + static_cast<std::int64_t>(std::lround((v - x0) / span * (inner - 1))); };
  auto py = [&](double v) { return size - pad - static_cast<std::int64_t>(std::lround((v - y0) / span * (inner - 1))); };
  const auto p = points.to(torch::kFloat64).contiguous();
  const auto a = p.accessor<double, 2>();
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    const auto color = groups.empty() ? kGrey : palette(static_cast<std::size_t>(groups[static_cast<std::size_t>(i)]));
    c.set(px(a[i][0]), py(a[i][1]), color);
  }
  if (path.defined() && path.numel() > 0) {
    const auto q = path.to(torch::kFloat64).reshape({-1, 2}).contiguous();
    const auto b = q.accessor<double, 2>();
    for (std::int64_t i = 0; i < q.size(0); ++i) {
      c.fill_rect(px(b[i][0]) - 2, py(b[i][1]) - 2, 5, 5, kBlack);
      if (i > 0) c.line(px(b[i - 1][0]), py(b[i - 1][1]), px(b[i][0]), py(b[i][1]), kBlack);
    }
  }
  return c;
}

}  // namespace cfaudit::figures
