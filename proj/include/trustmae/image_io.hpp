#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "trustmae/tensor.hpp"

namespace tmae {

// Interleaved 8-bit raster (gray or RGB).
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

// Reads 8- or 16-bit gray/RGB PNGs (alpha dropped, palettes expanded,
// 16-bit reduced to 8-bit).
Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& image);
// Single-channel 16-bit PNG.
void write_png16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint16_t>& values);
std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, std::size_t& width, std::size_t& height);

// [C,H,W] tensor in [-1,1] <-> 8-bit raster via v = q / 127.5 - 1.
Tensor raster_to_tensor(const Raster& image);
Raster tensor_to_raster(const Tensor& image);
// [H,W] mask in {0,1} <-> single-channel raster (nonzero -> 1).
Tensor raster_to_mask(const Raster& image);
Raster mask_to_raster(const Tensor& mask);

}  // namespace tmae
