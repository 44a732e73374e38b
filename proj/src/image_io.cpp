#include "trustmae/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <memory>

#include "trustmae/error.hpp"

namespace tmae {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& path, const char* mode) {
    File f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

struct PngError {
    char message[256] = {};
};

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
    auto* err = static_cast<PngError*>(png_get_error_ptr(png));
    std::snprintf(err->message, sizeof err->message, "%s", msg);
    png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

// Decodes into 8- or 16-bit gray/RGB rows; returns bytes per sample.
struct Decoded {
    std::size_t width = 0, height = 0, channels = 0, depth = 8;
    std::vector<std::uint8_t> bytes;
};

Decoded decode(const std::filesystem::path& path, bool keep16) {
    File f = open_file(path, "rb");
    std::uint8_t sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError(path.string() + " is not a PNG file");
    }
    PngError err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    png_infop info = png_create_info_struct(png);
    Decoded d;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode " + path.string() + ": " + err.message);
    }
    {
        png_init_io(png, f.get());
        png_set_sig_bytes(png, 8);
        png_read_info(png, info);
        const int color = png_get_color_type(png, info);
        const int depth = png_get_bit_depth(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        if (!keep16 && depth == 16) png_set_strip_16(png);
        if (depth == 16 && keep16) png_set_swap(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);
        d.width = png_get_image_width(png, info);
        d.height = png_get_image_height(png, info);
        d.channels = png_get_channels(png, info);
        d.depth = png_get_bit_depth(png, info);
        const std::size_t rowbytes = png_get_rowbytes(png, info);
        d.bytes.resize(rowbytes * d.height);
        rows.resize(d.height);
        for (std::size_t y = 0; y < d.height; ++y) rows[y] = d.bytes.data() + y * rowbytes;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (d.width == 0 || d.height == 0) throw IoError(path.string() + " has zero size");
    return d;
}

void encode(const std::filesystem::path& path, std::size_t width, std::size_t height, std::size_t channels,
            int depth, const std::uint8_t* data) {
    File f = open_file(path, "wb");
    PngError err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("cannot encode " + path.string() + ": " + err.message);
    }
    {
        png_init_io(png, f.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth,
                     channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        if (depth == 16) png_set_swap(png);
        const std::size_t rowbytes = width * channels * (depth / 8);
        for (std::size_t y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(data + y * rowbytes));
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, &info);
}

}  // namespace

Raster read_png(const std::filesystem::path& path) {
    Decoded d = decode(path, false);
    Raster r{d.width, d.height, d.channels, std::move(d.bytes)};
    if (r.channels != 1 && r.channels != 3) {
        throw IoError(path.string() + ": unsupported channel count " + std::to_string(r.channels));
    }
    return r;
}

void write_png(const std::filesystem::path& path, const Raster& image) {
    if (image.channels != 1 && image.channels != 3) throw IoError("png writer supports 1 or 3 channels");
    if (image.pixels.size() != image.width * image.height * image.channels) {
        throw ShapeError("raster buffer does not match its dimensions");
    }
    encode(path, image.width, image.height, image.channels, 8, image.pixels.data());
}

void write_png16(const std::filesystem::path& path, std::size_t width, std::size_t height,
                 const std::vector<std::uint16_t>& values) {
    if (values.size() != width * height) throw ShapeError("16-bit raster does not match its dimensions");
    encode(path, width, height, 1, 16, reinterpret_cast<const std::uint8_t*>(values.data()));
}

std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, std::size_t& width, std::size_t& height) {
    Decoded d = decode(path, true);
    if (d.channels != 1 || d.depth != 16) throw IoError(path.string() + " is not a 16-bit grayscale PNG");
    width = d.width;
    height = d.height;
    std::vector<std::uint16_t> out(width * height);
    std::copy(d.bytes.begin(), d.bytes.end(), reinterpret_cast<std::uint8_t*>(out.data()));
    return out;
}

Tensor raster_to_tensor(const Raster& image) {
    Tensor t({image.channels, image.height, image.width});
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x)
                t[(c * image.height + y) * image.width + x] = image.at(y, x, c) / 127.5 - 1.0;
    return t;
}

Raster tensor_to_raster(const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
        throw ShapeError("expected a [1|3, H, W] image, got " + shape_str(image.shape()));
    }
    Raster r{image.dim(2), image.dim(1), image.dim(0), {}};
    r.pixels.resize(r.width * r.height * r.channels);
    for (std::size_t c = 0; c < r.channels; ++c)
        for (std::size_t y = 0; y < r.height; ++y)
            for (std::size_t x = 0; x < r.width; ++x) {
                const double v = image[(c * r.height + y) * r.width + x];
                const double q = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
                r.pixels[(y * r.width + x) * r.channels + c] = static_cast<std::uint8_t>(q);
            }
    return r;
}

Tensor raster_to_mask(const Raster& image) {
    Tensor m({image.height, image.width}, 0.0);
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
            bool on = false;
            for (std::size_t c = 0; c < image.channels; ++c) on = on || image.at(y, x, c) != 0;
            m[y * image.width + x] = on ? 1.0 : 0.0;
        }
    return m;
}

Raster mask_to_raster(const Tensor& mask) {
    if (mask.rank() != 2) throw ShapeError("expected an [H, W] mask");
    Raster r{mask.dim(1), mask.dim(0), 1, std::vector<std::uint8_t>(mask.numel())};
    for (std::size_t i = 0; i < mask.numel(); ++i) r.pixels[i] = mask[i] > 0.5 ? 255 : 0;
    return r;
}

}  // namespace tmae
