#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "nxfr/errors.hpp"
#include "nxfr/model.hpp"
#include "nxfr/rng.hpp"
#include "nxfr/tensor.hpp"

namespace nxfr {

enum class Partition : std::uint8_t { Train, Eval };

/// Single-channel 32x32 images in [0,1] with labels 0..9 and a per-sample
/// train/eval tag. Ink is the high-valued region (white on black).
struct LabeledDataset {
    std::string name;
    Tensor<float> images;  ///< [N, 1, 32, 32]
    std::vector<std::uint8_t> labels;
    std::vector<Partition> partition;

    std::size_t size() const { return labels.size(); }

    std::size_t count(Partition p) const {
        return static_cast<std::size_t>(std::count(partition.begin(), partition.end(), p));
    }

    std::vector<std::size_t> indices(Partition p) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < partition.size(); ++i) {
            if (partition[i] == p) {
                out.push_back(i);
            }
        }
        return out;
    }

    /// Throws DatasetError unless shapes, labels, value range and partition
    /// length are consistent.
    void validate() const {
        const std::size_t n = labels.size();
        if (n == 0) {
            throw DatasetError("dataset '" + name + "': no samples");
        }
        if (!(images.shape() == Shape{n, 1, kImageSize, kImageSize})) {
            throw DatasetError("dataset '" + name + "': images have shape " + images.shape().str());
        }
        if (partition.size() != n) {
            throw DatasetError("dataset '" + name + "': partition tags do not match sample count");
        }
        for (auto l : labels) {
            if (l >= kNumClasses) {
                throw DatasetError("dataset '" + name + "': label " + std::to_string(l) + " outside 0..9");
            }
        }
        for (float v : images.values()) {
            if (!(v >= 0.0f && v <= 1.0f)) {
                throw DatasetError("dataset '" + name + "': pixel value outside [0,1]");
            }
        }
    }
};

using ClassHistogram = std::array<std::size_t, kNumClasses>;

inline ClassHistogram class_histogram(const LabeledDataset& d) {
    ClassHistogram h{};
    for (auto l : d.labels) {
        ++h.at(l);
    }
    return h;
}

inline ClassHistogram class_histogram(const LabeledDataset& d, Partition p) {
    ClassHistogram h{};
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.partition[i] == p) {
            ++h.at(d.labels[i]);
        }
    }
    return h;
}

/// v -> 1 - v. Values must already lie in [0,1].
template <typename T>
Tensor<T> invert(const Tensor<T>& images) {
    Tensor<T> out = images;
    for (auto& v : out.values()) {
        if (!(v >= T{0} && v <= T{1})) {
            throw DatasetError("invert: value outside [0,1] (decoding bug?)");
        }
        v = T{1} - v;
    }
    return out;
}

/// Seeded per-class hold-out: floor(fraction * n_c) samples of each class
/// (at least one) are tagged Eval, the rest Train.
inline LabeledDataset stratified_split(LabeledDataset d, double eval_fraction, std::uint64_t seed) {
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
        throw ConfigError("split: eval_fraction must be in (0,1)");
    }
    std::array<std::vector<std::size_t>, kNumClasses> by_class;
    for (std::size_t i = 0; i < d.size(); ++i) {
        by_class.at(d.labels[i]).push_back(i);
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        if (!by_class[c].empty() && by_class[c].size() < 2) {
            throw DatasetError("split: class " + std::to_string(c) + " has fewer than 2 samples");
        }
    }
    d.partition.assign(d.size(), Partition::Train);
    Rng rng(seed);
    for (auto& members : by_class) {
        if (members.empty()) {
            continue;
        }
        for (std::size_t i = members.size() - 1; i > 0; --i) {
            std::swap(members[i], members[rng.below(i + 1)]);
        }
        const auto n_eval = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(eval_fraction * static_cast<double>(members.size()))));
        for (std::size_t k = 0; k < n_eval; ++k) {
            d.partition[members[k]] = Partition::Eval;
        }
    }
    return d;
}

/// Copies the samples of one partition into a contiguous batch.
template <typename T = float>
Tensor<T> gather_images(const LabeledDataset& d, const std::vector<std::size_t>& idx) {
    const std::size_t stride = kImageSize * kImageSize;
    Tensor<T> out(Shape{std::max<std::size_t>(idx.size(), 1), 1, kImageSize, kImageSize});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const float* src = d.images.data() + idx[k] * stride;
        std::transform(src, src + stride, out.data() + k * stride, [](float v) { return static_cast<T>(v); });
    }
    return out;
}

inline std::vector<std::uint8_t> gather_labels(const LabeledDataset& d, const std::vector<std::size_t>& idx) {
    std::vector<std::uint8_t> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        out.push_back(d.labels[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// NMDS tensor archive: "NMDS", u32 version, u32 N, u32 H, u32 W, N label
// bytes, then N*H*W float32 pixels. All integers and floats little-endian.

inline constexpr std::uint32_t kArchiveVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file(const std::filesystem::path& path, const char* who) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(std::string(who) + ": cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes, const char* who) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error(std::string(who) + ": cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            throw Error(std::string(who) + ": write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error(std::string(who) + ": cannot rename onto " + path.string() + ": " + ec.message());
    }
}

} // namespace detail

inline void save_archive(const LabeledDataset& d, const std::filesystem::path& path) {
    d.validate();
    std::string out = "NMDS";
    detail::put_u32(out, kArchiveVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(d.size()));
    detail::put_u32(out, kImageSize);
    detail::put_u32(out, kImageSize);
    out.append(d.labels.begin(), d.labels.end());
    out.reserve(out.size() + d.images.size() * 4);
    for (float v : d.images.values()) {
        detail::put_f32(out, v);
    }
    detail::write_file_atomic(path, out, "archive");
}

/// Reads an NMDS archive. Partition tags are not stored; every sample comes
/// back tagged Train.
inline LabeledDataset load_archive(const std::filesystem::path& path, std::string name = {}) {
    const std::string bytes = detail::read_file(path, "archive");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 20 || bytes.compare(0, 4, "NMDS") != 0) {
        throw DatasetError("archive: bad magic in " + path.string());
    }
    if (detail::get_u32(p + 4) != kArchiveVersion) {
        throw DatasetError("archive: unsupported version " + std::to_string(detail::get_u32(p + 4)));
    }
    const std::size_t n = detail::get_u32(p + 8), h = detail::get_u32(p + 12), w = detail::get_u32(p + 16);
    if (h != kImageSize || w != kImageSize || n == 0) {
        throw DatasetError("archive: expected N>0 images of 32x32");
    }
    const std::size_t expected = 20 + n + n * h * w * 4;
    if (bytes.size() != expected) {
        throw DatasetError("archive: length " + std::to_string(bytes.size()) + " but header implies " +
                           std::to_string(expected));
    }
    LabeledDataset d;
    d.name = name.empty() ? path.stem().string() : std::move(name);
    d.labels.assign(p + 20, p + 20 + n);
    d.images = Tensor<float>(Shape{n, 1, h, w});
    const unsigned char* px = p + 20 + n;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        d.images[i] = detail::get_f32(px + 4 * i);
    }
    d.partition.assign(n, Partition::Train);
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Directory corpora: root/{0..9}/*.{png,bmp,jpg,jpeg,pgm}

struct DatasetManifest {
    std::filesystem::path root;
    std::array<std::vector<std::filesystem::path>, kNumClasses> files;  ///< sorted per class
    std::array<std::size_t, kNumClasses> counts{};
    std::uint64_t checksum = 0;  ///< FNV-1a over the relative file list
    std::size_t declared_classes = kNumClasses;

    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

inline bool is_image_file(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".bmp" || ext == ".jpg" || ext == ".jpeg" || ext == ".pgm";
}

/// Lists the corpus in lexicographic path order. Requires the ten class
/// directories "0".."9", each holding at least one image file.
inline DatasetManifest scan_directory(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) {
        throw DatasetError("dataset: not a directory: " + root.string());
    }
    DatasetManifest m;
    m.root = root;
    std::string listing;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const fs::path dir = root / std::to_string(c);
        if (!fs::is_directory(dir)) {
            throw DatasetError("dataset: missing class directory " + dir.string());
        }
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_regular_file() && is_image_file(entry.path())) {
                m.files[c].push_back(entry.path());
            }
        }
        std::sort(m.files[c].begin(), m.files[c].end());
        if (m.files[c].empty()) {
            throw DatasetError("dataset: class directory has no images: " + dir.string());
        }
        m.counts[c] = m.files[c].size();
        for (const auto& f : m.files[c]) {
            listing += fs::relative(f, root).generic_string();
            listing += '\n';
        }
    }
    m.checksum = fnv1a(listing);
    return m;
}

} // namespace nxfr
