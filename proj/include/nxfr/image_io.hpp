#pragma once

// Directory ingestion. Separate from dataset.hpp because it needs an image
// decoder (OpenCV imgcodecs/imgproc).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "nxfr/dataset.hpp"

namespace nxfr {

struct LoadOptions {
    /// Reject (skip) images that are not already 32x32 instead of resampling.
    bool strict = false;
};

struct LoadResult {
    LabeledDataset dataset;
    DatasetManifest manifest;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;
};

/// 1 - k/255, snapped to multiples of 2^-24. On that grid 1 - v is exact in
/// float, so invert() applied twice returns the loaded values bitwise.
inline float invert_pixel(std::uint8_t k) {
    constexpr double grid = 16777216.0;
    return static_cast<float>(std::round((255 - k) / 255.0 * grid) / grid);
}

/// Decodes `root/{0..9}/*` to grayscale, resamples to 32x32 (bilinear) when
/// needed, scales to [0,1] and inverts so ink is high-valued. Samples are
/// ordered by class, then by path. Undecodable files are skipped and
/// reported; zero usable images is an error.
inline LoadResult load_directory(const std::filesystem::path& root, const LoadOptions& options = {},
                                 std::string name = {}) {
    LoadResult r;
    r.manifest = scan_directory(root);
    const std::size_t stride = kImageSize * kImageSize;
    std::vector<float> pixels;
    pixels.reserve(r.manifest.total() * stride);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        for (const auto& file : r.manifest.files[c]) {
            cv::Mat img = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
            if (img.empty()) {
                r.warnings.push_back("undecodable image skipped: " + file.string());
                ++r.skipped;
                continue;
            }
            if (img.rows != static_cast<int>(kImageSize) || img.cols != static_cast<int>(kImageSize)) {
                if (options.strict) {
                    r.warnings.push_back("image is " + std::to_string(img.cols) + "x" + std::to_string(img.rows) +
                                         ", skipped in strict mode: " + file.string());
                    ++r.skipped;
                    continue;
                }
                cv::Mat resized;
                cv::resize(img, resized, cv::Size(kImageSize, kImageSize), 0, 0, cv::INTER_LINEAR);
                img = resized;
            }
            for (int y = 0; y < img.rows; ++y) {
                const std::uint8_t* row = img.ptr<std::uint8_t>(y);
                for (int x = 0; x < img.cols; ++x) {
                    pixels.push_back(invert_pixel(row[x]));
                }
            }
            r.dataset.labels.push_back(static_cast<std::uint8_t>(c));
        }
    }
    const std::size_t n = r.dataset.labels.size();
    if (n == 0) {
        throw DatasetError("dataset: no usable images under " + root.string());
    }
    if (name.empty()) {
        name = (root.filename().empty() ? root.parent_path() : root).filename().string();
    }
    r.dataset.name = std::move(name);
    r.dataset.images = Tensor<float>(Shape{n, 1, kImageSize, kImageSize}, std::move(pixels));
    r.dataset.partition.assign(n, Partition::Train);
    return r;
}

} // namespace nxfr
