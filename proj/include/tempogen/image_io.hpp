#pragma once

#include "tempogen/tokenizers.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tempogen {

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);  // throws std::invalid_argument

// round(p * 255) per pixel, and back.
std::vector<std::uint8_t> to_bytes(const ToyImage& img);
ToyImage from_bytes(const std::vector<std::uint8_t>& bytes, std::size_t height, std::size_t width);
// Snaps every pixel to the nearest multiple of 1/255.
ToyImage quantize_8bit(const ToyImage& img);

// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const ToyImage& img);
ToyImage read_pgm(const std::filesystem::path& path);

}  // namespace tempogen
