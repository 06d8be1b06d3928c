#pragma once

#include <string>
#include <vector>

#include "occ/error.hpp"

namespace occ::img {

inline constexpr int kSize = 224;  // fixed input resolution, both axes

// 224x224 RGB image, interleaved row-major doubles in [0,1].
class Image {
public:
    Image() : data_(static_cast<size_t>(kSize) * kSize * 3, 0.0) {}
    explicit Image(std::vector<double> data);

    double at(int y, int x, int c) const { return data_[idx(y, x, c)]; }
    double& at(int y, int x, int c) { return data_[idx(y, x, c)]; }
    void set(int y, int x, double r, double g, double b) {
        data_[idx(y, x, 0)] = r;
        data_[idx(y, x, 1)] = g;
        data_[idx(y, x, 2)] = b;
    }

    const std::vector<double>& data() const { return data_; }
    void validate() const;  // DomainError on any out-of-range value

    bool operator==(const Image& other) const { return data_ == other.data_; }

private:
    static size_t idx(int y, int x, int c) {
        return (static_cast<size_t>(y) * kSize + static_cast<size_t>(x)) * 3 + static_cast<size_t>(c);
    }
    std::vector<double> data_;
};

// Per-channel mean over 16x16 patches: 14x14 patches x 3 channels = 588 values,
// patch-major (row-scan), channel-minor.
std::vector<double> patch_pool(const Image& im);
inline constexpr int kPatchGrid = 14;
inline constexpr int kPatchFeatures = kPatchGrid * kPatchGrid * 3;

// Normalized 4x4x4 RGB histogram (64 bins) over all pixels.
std::vector<double> rgb_histogram(const Image& im);

// 8-bit RGB PNG. Values are rounded on write; a read image therefore matches the
// written one to within 1/255 per channel.
void write_png(const Image& im, const std::string& path);
Image read_png(const std::string& path);

}  // namespace occ::img
