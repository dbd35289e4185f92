#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace cfaudit::io {

/// Snap values in [0,1] onto the 8-bit grid so they survive a PNG round trip exactly.
torch::Tensor quantize8(const torch::Tensor& image);

/// Encodes a [C,H,W] (C = 1 or 3) or [H,W] image with values in [0,1] as 8-bit PNG.
std::vector<std::uint8_t> encode_png(const torch::Tensor& image);
/// Decodes a PNG into a float [C,H,W] tensor scaled to [0,1].
torch::Tensor decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

std::string png_base64(const torch::Tensor& image);
torch::Tensor png_from_base64(std::string_view text);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace cfaudit::io
