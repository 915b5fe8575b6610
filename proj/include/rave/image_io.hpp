#pragma once

#include <filesystem>

#include "rave/image.hpp"

namespace rave {

/// Reads an 8-bit PNG/JPEG as RGB in [0, 1].
Image read_image(const std::filesystem::path& path);

/// Writes an 8-bit sRGB file; format follows the extension (.png, .jpg, .jpeg).
void write_image(const std::filesystem::path& path, const Image& image);

bool is_image_file(const std::filesystem::path& path);

}  // namespace rave
