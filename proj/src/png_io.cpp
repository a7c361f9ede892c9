#include "qseg/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "qseg/error.hpp"

namespace qseg {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct WriteCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~WriteCtx() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

struct ReadCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~ReadCtx() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void write_rows(const std::string& path, int h, int w, int bit_depth, int color_type,
                std::vector<png_bytep>& rows) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, "io", "cannot open '" + path + "' for writing");
    WriteCtx ctx;
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(ctx.png, "io", "libpng writer initialization failed");
    ctx.info = png_create_info_struct(ctx.png);
    require(ctx.info, "io", "libpng writer initialization failed");
    if (setjmp(png_jmpbuf(ctx.png))) fail("io", "libpng write error for '" + path + "'");
    png_init_io(ctx.png, f.get());
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    if (bit_depth < 8) png_set_packing(ctx.png);
    png_write_image(ctx.png, rows.data());
    png_write_end(ctx.png, nullptr);
}

void check_2d(const Tensor& t, const char* what) {
    require(t.rank() == 2 || (t.rank() == 3 && t.extent(2) == 1), "shape_mismatch",
            std::string(what) + " must be H x W (x1), got " + shape_string(t.shape()));
}

}  // namespace

void write_png_gray8(const std::string& path, const Tensor& map) {
    check_2d(map, "probability map");
    const int h = map.extent(0), w = map.extent(1);
    std::vector<png_byte> pixels(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(map[i], 0.0, 1.0);
        pixels[i] = static_cast<png_byte>(std::lround(v * 255.0));
    }
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = &pixels[static_cast<size_t>(y) * w];
    write_rows(path, h, w, 8, PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_mask1(const std::string& path, const Tensor& mask) {
    check_2d(mask, "mask");
    const int h = mask.extent(0), w = mask.extent(1);
    std::vector<png_byte> pixels(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = mask[i] != 0.0 ? 1 : 0;
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = &pixels[static_cast<size_t>(y) * w];
    write_rows(path, h, w, 1, PNG_COLOR_TYPE_GRAY, rows);
}

Tensor read_png_gray(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, "io", "cannot open '" + path + "' for reading");
    png_byte header[8];
    require(std::fread(header, 1, 8, f.get()) == 8 && !png_sig_cmp(header, 0, 8), "bad_format",
            "'" + path + "' is not a PNG file");

    ReadCtx ctx;
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(ctx.png, "io", "libpng reader initialization failed");
    ctx.info = png_create_info_struct(ctx.png);
    require(ctx.info, "io", "libpng reader initialization failed");
    if (setjmp(png_jmpbuf(ctx.png))) fail("io", "libpng read error for '" + path + "'");
    png_init_io(ctx.png, f.get());
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);

    const int color = png_get_color_type(ctx.png, ctx.info);
    require(color == PNG_COLOR_TYPE_GRAY, "bad_format",
            "'" + path + "' must be a grayscale PNG");
    if (png_get_bit_depth(ctx.png, ctx.info) < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
    if (png_get_bit_depth(ctx.png, ctx.info) == 16) png_set_strip_16(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    const int h = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
    const int w = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
    std::vector<png_byte> pixels(static_cast<size_t>(h) * w);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = &pixels[static_cast<size_t>(y) * w];
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    Tensor out({h, w, 1});
    for (size_t i = 0; i < pixels.size(); ++i) out[i] = pixels[i] / 255.0;
    return out;
}

namespace {

bool on_boundary(const Tensor& mask, int y, int x) {
    if (mask(y, x) == 0.0) return false;
    const int h = mask.extent(0), w = mask.extent(1);
    const int ny[4] = {y - 1, y + 1, y, y};
    const int nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) return true;
        if (mask(ny[k], nx[k]) == 0.0) return true;
    }
    return false;
}

}  // namespace

void write_png_overlay(const std::string& path, const Tensor& image, const Tensor& predicted,
                       const Tensor* truth) {
    check_2d(image, "image");
    check_2d(predicted, "predicted mask");
    const int h = image.extent(0), w = image.extent(1);
    std::vector<png_byte> pixels(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = (static_cast<size_t>(y) * w + x) * 3;
            const double v = std::clamp(image[static_cast<size_t>(y) * w + x], 0.0, 1.0);
            png_byte r = static_cast<png_byte>(std::lround(v * 255.0));
            png_byte g = r, b = r;
            if (truth && on_boundary(*truth, y, x)) {
                r = 0, g = 255, b = 0;
            }
            if (on_boundary(predicted, y, x)) {
                r = 255, g = 0, b = 0;
            }
            pixels[i] = r;
            pixels[i + 1] = g;
            pixels[i + 2] = b;
        }
    }
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) {
        rows[static_cast<size_t>(y)] = &pixels[static_cast<size_t>(y) * w * 3];
    }
    write_rows(path, h, w, 8, PNG_COLOR_TYPE_RGB, rows);
}

}  // namespace qseg
