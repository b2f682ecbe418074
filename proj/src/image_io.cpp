#include "protopart/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

#include "protopart/errors.hpp"

namespace protopart {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f != nullptr) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err != nullptr) *err = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

// libpng reports errors through longjmp; keep everything with a destructor
// outside the setjmp frames below.
bool decode(std::FILE* fp, Raster& out, std::string& error) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_error_fn, png_warning_fn);
    if (png == nullptr) {
        error = "png_create_read_struct failed";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        error = "png_create_info_struct failed";
        return false;
    }
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
    png_read_update_info(png, info);

    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * out.channels, 0);
    rows.resize(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * out.width * out.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

struct MemoryWriter {
    std::vector<std::uint8_t>* buffer;
};

void write_to_memory(png_structp png, png_bytep data, png_size_t len) {
    auto* w = static_cast<MemoryWriter*>(png_get_io_ptr(png));
    w->buffer->insert(w->buffer->end(), data, data + len);
}

void flush_noop(png_structp) {}

bool encode(const Raster& img, std::FILE* fp, std::vector<std::uint8_t>* memory, std::string& error) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_error_fn, png_warning_fn);
    if (png == nullptr) {
        error = "png_create_write_struct failed";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        error = "png_create_info_struct failed";
        return false;
    }
    MemoryWriter writer{memory};
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) {
        rows[y] = const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    if (fp != nullptr) {
        png_init_io(png, fp);
    } else {
        png_set_write_fn(png, &writer, write_to_memory, flush_noop);
    }
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

void check_writable(const Raster& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("PNG writer supports 1 or 3 channels");
    if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
        throw IoError("raster buffer size does not match its dimensions");
    }
}

}  // namespace

Raster read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image '" + path + "'");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("'" + path + "' is not a PNG file");
    }
    std::rewind(fp.get());
    Raster out;
    std::string error;
    if (!decode(fp.get(), out, error)) throw IoError("cannot decode '" + path + "': " + error);
    return out;
}

void write_png(const std::string& path, const Raster& image) {
    check_writable(image);
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write image '" + path + "'");
    std::string error;
    if (!encode(image, fp.get(), nullptr, error)) throw IoError("cannot encode '" + path + "': " + error);
}

std::vector<std::uint8_t> encode_png(const Raster& image) {
    check_writable(image);
    std::vector<std::uint8_t> buffer;
    std::string error;
    if (!encode(image, nullptr, &buffer, error)) throw IoError("cannot encode PNG: " + error);
    return buffer;
}

Raster to_rgb(const Raster& image) {
    if (image.channels == 3) return image;
    Raster out(image.width, image.height, 3);
    for (std::size_t i = 0; i < static_cast<std::size_t>(image.width) * image.height; ++i) {
        std::memset(out.pixels.data() + 3 * i, image.pixels[i], 3);
    }
    return out;
}

Raster to_gray(const Raster& image) {
    if (image.channels == 1) return image;
    Raster out(image.width, image.height, 1);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const auto* p = image.pixels.data() + i * image.channels;
        out.pixels[i] = static_cast<std::uint8_t>((299 * p[0] + 587 * p[1] + 114 * p[2] + 500) / 1000);
    }
    return out;
}

}  // namespace protopart
