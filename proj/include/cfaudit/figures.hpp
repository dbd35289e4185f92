#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace cfaudit::figures {

using Color = std::array<float, 3>;

inline constexpr Color kBlack{0.f, 0.f, 0.f};
inline constexpr Color kWhite{1.f, 1.f, 1.f};
inline constexpr Color kGrey{0.6f, 0.6f, 0.6f};

/// Qualitative palette, cycled by index.
Color palette(std::size_t index);

/// RGB raster in [0,1] with simple drawing primitives; coordinates are (x, y) from the top-left.
class Canvas {
 public:
  Canvas(std::int64_t width, std::int64_t height, Color background = kWhite);

  std::int64_t width() const { return width_; }
  std::int64_t height() const { return height_; }
  const torch::Tensor& pixels() const { return pixels_; }  // [3, H, W]

  void set(std::int64_t x, std::int64_t y, Color color);
  void fill_rect(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h, Color color);
  void rect_outline(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h, Color color);
  void line(std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1, Color color);
  /// 3x5 pixel font scaled by `scale`; lowercase prints as uppercase, unknown glyphs as blanks.
  void text(std::int64_t x, std::int64_t y, std::string_view text, Color color, std::int64_t scale = 1);
  /// Pastes a [C,H,W] or [H,W] image (nearest-neighbour upscaled).
  void blit(const torch::Tensor& image, std::int64_t x, std::int64_t y, std::int64_t scale = 1);

  void save(const std::filesystem::path& path) const;

 private:
  std::int64_t width_;
  std::int64_t height_;
  torch::Tensor pixels_;
};

/// Width in pixels of `text` at `scale`.
std::int64_t text_width(std::string_view text, std::int64_t scale = 1);

/// Panels side by side with a caption under each (e.g. "0.93" for f(x_c)).
Canvas image_strip(const std::vector<torch::Tensor>& panels, const std::vector<std::string>& captions,
                   std::int64_t scale = 2);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Polylines with point markers on a shared axis box; fixed [0,1] ranges when `unit_axes`.
Canvas line_chart(const std::vector<Series>& series, std::string_view title, bool unit_axes = true,
                  std::int64_t width = 360, std::int64_t height = 260);

/// Horizontal bars with optional +/- error whiskers, labelled on the left.
Canvas bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                 const std::vector<double>& errors, std::string_view title, std::int64_t width = 420);

/// 2-D points coloured by group, with an optional highlighted path drawn on top.
Canvas scatter_chart(const torch::Tensor& points, const std::vector<std::int64_t>& groups, const torch::Tensor& path,
                     std::string_view title, std::int64_t size = 320);

}  // namespace cfaudit::figures
