#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "layerprobe/io.hpp"
#include "layerprobe/tensor.hpp"

namespace layerprobe {

/// A loaded image split: tensors scaled to [0,1] plus class labels.
struct DatasetHandle {
    std::vector<Tensor> images;
    std::vector<int> labels;
    int num_classes = 0;
    std::string split;  // "train" | "test"

    std::size_t size() const { return images.size(); }

    void check() const {
        if (images.size() != labels.size()) {
            throw DataError("dataset has " + std::to_string(images.size()) + " images but " +
                            std::to_string(labels.size()) + " labels");
        }
        for (int l : labels) {
            if (l < 0 || l >= num_classes) {
                throw DataError("dataset label " + std::to_string(l) + " out of range for " +
                                std::to_string(num_classes) + " classes");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// IDX format (big-endian magic and dimension header, ubyte payload)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t get_u32_be(const std::string& bytes, std::size_t offset, const char* what) {
    if (offset + 4 > bytes.size()) {
        throw FormatError(std::string("IDX file truncated reading ") + what + " at byte offset " +
                          std::to_string(offset));
    }
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

}  // namespace detail

/// Parses an IDX ubyte tensor file; returns dims and raw bytes scaled later
/// by the callers. Magic layout: 0x00 0x00 <dtype> <ndim>.
struct IdxData {
    std::vector<std::uint32_t> dims;
    std::string payload;
};

inline IdxData parse_idx(const std::filesystem::path& path, int expected_ndim) {
    const std::string bytes = read_file(path);
    const std::uint32_t magic = detail::get_u32_be(bytes, 0, "magic");
    if ((magic >> 16) != 0) {
        throw FormatError("bad IDX magic 0x" + std::to_string(magic) + " in " + path.string() +
                          " at byte offset 0");
    }
    const int dtype = (magic >> 8) & 0xff;
    const int ndim = magic & 0xff;
    if (dtype != 0x08) {
        throw FormatError("unsupported IDX data type 0x" + std::to_string(dtype) + " in " +
                          path.string() + " at byte offset 2 (only ubyte is supported)");
    }
    if (ndim != expected_ndim) {
        throw FormatError("IDX file " + path.string() + " has " + std::to_string(ndim) +
                          " dimensions, expected " + std::to_string(expected_ndim) +
                          " (byte offset 3)");
    }
    IdxData out;
    std::size_t offset = 4;
    std::uint64_t total = 1;
    for (int i = 0; i < ndim; ++i) {
        const std::uint32_t d = detail::get_u32_be(bytes, offset, "dimension");
        out.dims.push_back(d);
        total *= d;
        offset += 4;
    }
    if (bytes.size() != offset + total) {
        throw FormatError("IDX file " + path.string() + " has " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(offset + total) +
                          " (payload starts at byte offset " + std::to_string(offset) + ")");
    }
    out.payload = bytes.substr(offset);
    return out;
}

/// Loads an IDX image/label file pair. Pixels scale to [0,1]; images come out
/// as [1,H,W].
inline DatasetHandle load_idx_dataset(const std::filesystem::path& images_path,
                                      const std::filesystem::path& labels_path, int num_classes,
                                      std::string split) {
    const IdxData img = parse_idx(images_path, 3);
    const IdxData lab = parse_idx(labels_path, 1);
    if (img.dims[0] != lab.dims[0]) {
        throw DataError("IDX image count " + std::to_string(img.dims[0]) +
                        " does not match label count " + std::to_string(lab.dims[0]));
    }
    const int n = static_cast<int>(img.dims[0]);
    const int h = static_cast<int>(img.dims[1]);
    const int w = static_cast<int>(img.dims[2]);
    if (n == 0) throw DataError("IDX dataset " + images_path.string() + " is empty");

    DatasetHandle d;
    d.num_classes = num_classes;
    d.split = std::move(split);
    d.images.reserve(n);
    d.labels.reserve(n);
    const std::size_t area = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        Tensor t({1, h, w});
        const unsigned char* p =
            reinterpret_cast<const unsigned char*>(img.payload.data()) + static_cast<std::size_t>(i) * area;
        for (std::size_t j = 0; j < area; ++j) t.data[j] = static_cast<float>(p[j]) / 255.0f;
        d.images.push_back(std::move(t));
        d.labels.push_back(static_cast<unsigned char>(lab.payload[i]));
    }
    d.check();
    return d;
}

// ---------------------------------------------------------------------------
// PNG directory format: one subdirectory per class, named by class index
// ---------------------------------------------------------------------------

/// Decodes one PNG into a [C,H,W] tensor in [0,1]. 16-bit depth is reduced
/// to 8, palettes expand to RGB, alpha is stripped; C ends up 1 or 3.
inline Tensor load_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError("failed to initialize the PNG reader");
    }

    int width = 0, height = 0, channels = 0;
    std::vector<unsigned char> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError(path.string() + " is not a valid PNG file");
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_expand(png);  // palette -> rgb, low-bit gray -> 8 bit
    png_read_update_info(png, info);

    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    channels = static_cast<int>(png_get_channels(png, info));
    if ((channels != 1 && channels != 3) || width <= 0 || height <= 0) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError(path.string() + " decodes to an unsupported pixel layout");
    }
    pixels.resize(static_cast<std::size_t>(width) * height * channels);
    {
        std::vector<png_bytep> rows(height);
        for (int y = 0; y < height; ++y) {
            rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * channels;
        }
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    // interleaved rows -> planar [C,H,W]
    Tensor t({channels, height, width});
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < channels; ++c) {
                t.data[c * plane + static_cast<std::size_t>(y) * width + x] =
                    static_cast<float>(pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]) /
                    255.0f;
            }
        }
    }
    return t;
}

inline DatasetHandle load_png_dir_dataset(const std::filesystem::path& dir, int num_classes,
                                          std::string split) {
    if (!std::filesystem::is_directory(dir)) {
        throw DataError(dir.string() + " is not a directory");
    }
    DatasetHandle d;
    d.num_classes = num_classes;
    d.split = std::move(split);

    std::vector<std::filesystem::path> class_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cdir : class_dirs) {
        const std::string name = cdir.filename().string();
        int cls = -1;
        try {
            std::size_t pos = 0;
            cls = std::stoi(name, &pos);
            if (pos != name.size()) cls = -1;
        } catch (...) {
            cls = -1;
        }
        if (cls < 0 || cls >= num_classes) {
            throw DataError("class directory '" + name + "' in " + dir.string() +
                            " is not a class index below " + std::to_string(num_classes));
        }
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(cdir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            d.images.push_back(load_png(f));
            d.labels.push_back(cls);
        }
    }
    if (d.images.empty()) throw DataError("no PNG images found under " + dir.string());
    d.check();
    return d;
}

/// Centers an image inside the model input shape, zero-padding the border
/// (LeNet-style: 28x28 digits inside a 32x32 input).
inline Tensor fit_to_input(const Tensor& image, const std::array<int, 3>& input_shape) {
    require_rank(image, 3, "dataset image");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (c != input_shape[0] || h > input_shape[1] || w > input_shape[2]) {
        throw DimensionError("image " + Tensor::shape_string(image.shape) +
                             " does not fit the model input [" + std::to_string(input_shape[0]) + "," +
                             std::to_string(input_shape[1]) + "," + std::to_string(input_shape[2]) + "]");
    }
    if (h == input_shape[1] && w == input_shape[2]) return image;
    Tensor out({input_shape[0], input_shape[1], input_shape[2]});
    const int oy = (input_shape[1] - h) / 2;
    const int ox = (input_shape[2] - w) / 2;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) out.at3(ch, oy + y, ox + x) = image.at3(ch, y, x);
        }
    }
    return out;
}

}  // namespace layerprobe
