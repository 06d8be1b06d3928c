#include "occ/image.hpp"

#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

namespace occ::img {

Image::Image(std::vector<double> data) : data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(kSize) * kSize * 3)
        throw DimensionError("image buffer must hold 224x224x3 values, got " +
                             std::to_string(data_.size()));
    validate();
}

void Image::validate() const {
    for (double v : data_)
        if (!(v >= 0.0 && v <= 1.0))
            throw DomainError("pixel value " + std::to_string(v) + " outside [0,1]");
}

std::vector<double> patch_pool(const Image& im) {
    std::vector<double> out(static_cast<size_t>(kPatchFeatures), 0.0);
    constexpr int P = kSize / kPatchGrid;  // 16
    for (int py = 0; py < kPatchGrid; ++py)
        for (int px = 0; px < kPatchGrid; ++px) {
            double acc[3] = {0.0, 0.0, 0.0};
            for (int y = py * P; y < (py + 1) * P; ++y)
                for (int x = px * P; x < (px + 1) * P; ++x)
                    for (int c = 0; c < 3; ++c) acc[c] += im.at(y, x, c);
            size_t base = (static_cast<size_t>(py) * kPatchGrid + px) * 3;
            for (int c = 0; c < 3; ++c) out[base + static_cast<size_t>(c)] = acc[c] / (P * P);
        }
    return out;
}

std::vector<double> rgb_histogram(const Image& im) {
    std::vector<double> out(64, 0.0);
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            auto bin = [](double v) { return std::min(3, static_cast<int>(v * 4.0)); };
            int b = 16 * bin(im.at(y, x, 0)) + 4 * bin(im.at(y, x, 1)) + bin(im.at(y, x, 2));
            out[static_cast<size_t>(b)] += 1.0;
        }
    double total = static_cast<double>(kSize) * kSize;
    for (double& v : out) v /= total;
    return out;
}

namespace {
struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void quiet_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void quiet_warning(png_structp, png_const_charp) {}
}  // namespace

void write_png(const Image& im, const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, quiet_error, quiet_warning);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<unsigned char> bytes(static_cast<size_t>(kSize) * kSize * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(kSize));
    for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = im.at(y, x, c);
                bytes[(static_cast<size_t>(y) * kSize + x) * 3 + static_cast<size_t>(c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * kSize * 3;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, kSize, kSize, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, quiet_error, quiet_warning);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("not a readable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    if (w != kSize || h != kSize) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("PNG " + path + " is " + std::to_string(w) + "x" + std::to_string(h) +
                          ", expected 224x224");
    }
    // normalize any honest RGB-ish encoding to 8-bit RGB
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    std::vector<unsigned char> bytes(static_cast<size_t>(kSize) * kSize * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(kSize));
    for (int y = 0; y < kSize; ++y)
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * kSize * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image im;
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x)
            im.set(y, x, bytes[(static_cast<size_t>(y) * kSize + x) * 3 + 0] / 255.0,
                   bytes[(static_cast<size_t>(y) * kSize + x) * 3 + 1] / 255.0,
                   bytes[(static_cast<size_t>(y) * kSize + x) * 3 + 2] / 255.0);
    return im;
}

}  // namespace occ::img
