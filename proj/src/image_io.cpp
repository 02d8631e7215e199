#include "km/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace km {

namespace {

int pnm_token(std::istream& in) {
    // skips whitespace and # comments, reads one unsigned int
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
        } else if (!std::isspace(ch)) {
            break;
        }
    }
    KM_REQUIRE(ch != EOF, IoError, "truncated pnm header");
    int v = 0;
    bool any = false;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        any = true;
        ch = in.get();
    }
    KM_REQUIRE(any, IoError, "malformed pnm header");
    return v;
}

ImageU8 read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    KM_REQUIRE(in.good(), IoError, "cannot open ", path);
    char m0 = char(in.get()), m1 = char(in.get());
    KM_REQUIRE(m0 == 'P' && (m1 == '2' || m1 == '5' || m1 == '6'), IoError, path,
               ": unsupported pnm magic");
    ImageU8 img;
    img.w = pnm_token(in);
    img.h = pnm_token(in);
    int maxval = pnm_token(in);
    KM_REQUIRE(img.w > 0 && img.h > 0, IoError, path, ": bad pnm size");
    KM_REQUIRE(maxval > 0 && maxval <= 255, IoError, path, ": only 8-bit pnm supported");
    img.c = m1 == '6' ? 3 : 1;
    std::size_t count = static_cast<std::size_t>(img.w) * img.h * img.c;
    img.px.resize(count);
    if (m1 == '2') {
        for (std::size_t i = 0; i < count; ++i) img.px[i] = static_cast<unsigned char>(pnm_token(in));
    } else {
        in.read(reinterpret_cast<char*>(img.px.data()), std::streamsize(count));
        KM_REQUIRE(in.gcount() == std::streamsize(count), IoError, path, ": truncated pnm data");
    }
    return img;
}

ImageU8 read_png_file(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    KM_REQUIRE(fp != nullptr, IoError, "cannot open ", path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError(cat(path, ": png decode failed"));
    }
    png_init_io(png, fp);
    png_read_png(png, info,
                 PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND |
                     PNG_TRANSFORM_STRIP_ALPHA,
                 nullptr);
    ImageU8 img;
    img.w = int(png_get_image_width(png, info));
    img.h = int(png_get_image_height(png, info));
    img.c = int(png_get_channels(png, info));
    KM_REQUIRE(img.c == 1 || img.c == 3, IoError, path, ": unsupported png channel count ", img.c);
    png_bytepp rows = png_get_rows(png, info);
    std::size_t stride = static_cast<std::size_t>(img.w) * img.c;
    img.px.resize(stride * img.h);
    for (int y = 0; y < img.h; ++y) std::memcpy(img.px.data() + y * stride, rows[y], stride);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    KM_REQUIRE(probe.good(), IoError, "cannot open ", path);
    unsigned char sig[8] = {0};
    probe.read(reinterpret_cast<char*>(sig), 8);
    probe.close();
    if (sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G') return read_png_file(path);
    if (sig[0] == 'P' && (sig[1] == '2' || sig[1] == '5' || sig[1] == '6')) return read_pnm(path);
    throw IoError(cat(path, ": unrecognized image format"));
}

void write_pgm(const std::string& path, const ImageU8& img) {
    KM_REQUIRE(img.c == 1, IoError, "write_pgm wants 1 channel, got ", img.c);
    std::ofstream out(path, std::ios::binary);
    KM_REQUIRE(out.good(), IoError, "cannot write ", path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size()));
    KM_REQUIRE(out.good(), IoError, "short write to ", path);
}

ImageU8 resize_bilinear(const ImageU8& img, int nw, int nh) {
    KM_REQUIRE(nw > 0 && nh > 0, ConfigError, "resize to ", nw, "x", nh);
    ImageU8 out;
    out.w = nw;
    out.h = nh;
    out.c = img.c;
    out.px.resize(static_cast<std::size_t>(nw) * nh * img.c);
    double sx = double(img.w) / nw, sy = double(img.h) / nh;
    for (int y = 0; y < nh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = int(std::floor(fy));
        double ry = fy - y0;
        int y0c = std::min(std::max(y0, 0), img.h - 1);
        int y1c = std::min(std::max(y0 + 1, 0), img.h - 1);
        for (int x = 0; x < nw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = int(std::floor(fx));
            double rx = fx - x0;
            int x0c = std::min(std::max(x0, 0), img.w - 1);
            int x1c = std::min(std::max(x0 + 1, 0), img.w - 1);
            for (int ch = 0; ch < img.c; ++ch) {
                double v = (1 - ry) * ((1 - rx) * img.at(y0c, x0c, ch) + rx * img.at(y0c, x1c, ch)) +
                           ry * ((1 - rx) * img.at(y1c, x0c, ch) + rx * img.at(y1c, x1c, ch));
                out.px[(static_cast<std::size_t>(y) * nw + x) * img.c + ch] =
                    static_cast<unsigned char>(std::min(255.0, std::max(0.0, v + 0.5)));
            }
        }
    }
    return out;
}

ImageU8 resize_nearest(const ImageU8& img, int nw, int nh) {
    KM_REQUIRE(nw > 0 && nh > 0, ConfigError, "resize to ", nw, "x", nh);
    ImageU8 out;
    out.w = nw;
    out.h = nh;
    out.c = img.c;
    out.px.resize(static_cast<std::size_t>(nw) * nh * img.c);
    for (int y = 0; y < nh; ++y) {
        int sy = std::min(int((y + 0.5) * img.h / nh), img.h - 1);
        for (int x = 0; x < nw; ++x) {
            int sx = std::min(int((x + 0.5) * img.w / nw), img.w - 1);
            for (int ch = 0; ch < img.c; ++ch)
                out.px[(static_cast<std::size_t>(y) * nw + x) * img.c + ch] = img.at(sy, sx, ch);
        }
    }
    return out;
}

ImageU8 to_gray(const ImageU8& img) {
    if (img.c == 1) return img;
    ImageU8 out;
    out.w = img.w;
    out.h = img.h;
    out.c = 1;
    out.px.resize(static_cast<std::size_t>(img.w) * img.h);
    for (std::size_t i = 0; i < out.px.size(); ++i) {
        double v = 0.299 * img.px[i * 3] + 0.587 * img.px[i * 3 + 1] + 0.114 * img.px[i * 3 + 2];
        out.px[i] = static_cast<unsigned char>(std::min(255.0, v + 0.5));
    }
    return out;
}

}  // namespace km
