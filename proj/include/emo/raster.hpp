#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emo/error.hpp"

namespace emo {

// 8-bit row-major raster, 1 (grey/mask/probability) or 3 (RGB) interleaved channels.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    Raster() = default;
    Raster(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {
        if (w < 0 || h < 0 || (c != 1 && c != 3))
            throw InvalidInput("raster must have 1 or 3 channels and non-negative dims");
    }

    std::size_t index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    std::uint8_t at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
    std::uint8_t& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }

    bool empty() const { return width == 0 || height == 0; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    bool operator==(const Raster& o) const = default;
};

struct PyramidLevel {
    double factor = 1.0; // downsample factor relative to level 0
    int width = 0;
    int height = 0;
};

struct SlideMeta {
    std::string slide_id;
    double mpp = 0.0; // µm per pixel at level 0
    std::vector<PyramidLevel> levels;

    void validate() const;
    // index of the declared level whose factor is closest to `target` (log scale)
    int nearest_level(double target) const;
};

struct OdPixel {
    double r = 0.0, g = 0.0, b = 0.0;
};

enum class ResampleMethod { lanczos, nearest };

// HSV with all three channels scaled to [0,255]; hue 0 = red, wraps at 255.
Raster rgb_to_hsv(const Raster& rgb);

// CIELAB (D65, linear-RGB variant) stored 8-bit: L 0..100 -> 0..255,
// a and b offset by +128. Encoding is decode-aware so that the 8-bit
// round trip stays within 2 levels per channel.
Raster rgb_to_lab(const Raster& rgb);
Raster lab_to_rgb(const Raster& lab);

// Optical density: OD = -log10(max(I,1)/I0), per channel. I0 defaults to 255.
OdPixel to_od(std::uint8_t r, std::uint8_t g, std::uint8_t b, double i0 = 255.0);
void from_od(const OdPixel& od, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b,
             double i0 = 255.0);
double channel_to_od(std::uint8_t v, double i0 = 255.0);
std::uint8_t channel_from_od(double od, double i0 = 255.0);

// Resize by `factor` (output dims = round(input/factor), each >= 1).
// lanczos uses a Lanczos-3 kernel widened for downscaling; nearest takes
// floor(dst*scale) so integer-factor reduction keeps each block's top-left.
Raster resample(const Raster& src, double factor, ResampleMethod method);

// ITU-R 601 luma: round(0.299 R + 0.587 G + 0.114 B). 1-channel input passes through.
Raster to_grey(const Raster& rgb);

} // namespace emo
