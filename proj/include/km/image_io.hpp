#pragma once

#include <string>
#include <vector>

#include "km/common.hpp"

// 8-bit image io: PNG (libpng), PGM (P2/P5), PPM (P6). Pixels are interleaved
// row-major, c is 1 or 3.

namespace km {

struct ImageU8 {
    int w = 0, h = 0, c = 0;
    std::vector<unsigned char> px;

    unsigned char at(int y, int x, int ch) const {
        return px[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
};

ImageU8 read_image(const std::string& path);
void write_pgm(const std::string& path, const ImageU8& img);

ImageU8 resize_bilinear(const ImageU8& img, int nw, int nh);
ImageU8 resize_nearest(const ImageU8& img, int nw, int nh);

ImageU8 to_gray(const ImageU8& img);

}  // namespace km
