#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace i2p {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major

    GrayImage() = default;
    GrayImage(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// 8-bit grayscale PNG only; other colour types are converted to gray on read.
void write_png(const std::filesystem::path& file, const GrayImage& image);
GrayImage read_png(const std::filesystem::path& file);
std::string read_file_bytes(const std::filesystem::path& file);

} // namespace i2p
