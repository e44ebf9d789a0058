#include "emo/image_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include <jpeglib.h>
#include <png.h>

#include <json.hpp>

namespace emo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PNG

Raster read_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw InvalidInput("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw RuntimeFailure("PNG decode failed: " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
        png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int ch = png_get_channels(png, info);
    if (ch != 1 && ch != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw InvalidInput(path.string() + ": unsupported channel count " + std::to_string(ch));
    }

    Raster out(w, h, ch);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = &out.data[out.index(0, y)];
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw RuntimeFailure("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw RuntimeFailure("PNG encode failed: " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, raster.width, raster.height, 8,
                 raster.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(raster.height);
    for (int y = 0; y < raster.height; ++y)
        rows[y] = const_cast<png_bytep>(&raster.data[raster.index(0, y)]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// ---------------------------------------------------------------------------
// JPEG

namespace {

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jmp;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jmp, 1);
}

} // namespace

std::vector<std::uint8_t> encode_jpeg(const Raster& raster, int quality) {
    if (raster.channels != 3 && raster.channels != 1)
        throw InvalidInput("JPEG encode requires 1 or 3 channels");
    if (quality < 1 || quality > 100) throw InvalidInput("JPEG quality must be 1..100");

    jpeg_compress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    unsigned char* buf = nullptr;
    unsigned long buf_size = 0;
    if (setjmp(err.jmp)) {
        jpeg_destroy_compress(&cinfo);
        if (buf) free(buf);
        throw RuntimeFailure("JPEG encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buf_size);
    cinfo.image_width = raster.width;
    cinfo.image_height = raster.height;
    cinfo.input_components = raster.channels;
    cinfo.in_color_space = raster.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = const_cast<JSAMPROW>(&raster.data[raster.index(0, cinfo.next_scanline)]);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    std::vector<std::uint8_t> out(buf, buf + buf_size);
    jpeg_destroy_compress(&cinfo);
    free(buf);
    return out;
}

Raster decode_jpeg(const std::vector<std::uint8_t>& bytes) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jmp)) {
        jpeg_destroy_decompress(&cinfo);
        throw RuntimeFailure("JPEG decode failed");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), bytes.size());
    jpeg_read_header(&cinfo, TRUE);
    jpeg_start_decompress(&cinfo);
    const int ch = cinfo.output_components;
    if (ch != 1 && ch != 3) {
        jpeg_destroy_decompress(&cinfo);
        throw InvalidInput("unsupported JPEG channel count " + std::to_string(ch));
    }
    Raster out(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height), ch);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = &out.data[out.index(0, cinfo.output_scanline)];
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

Raster read_jpeg(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_jpeg(bytes);
}

void write_jpeg(const std::filesystem::path& path, const Raster& raster, int quality) {
    const auto bytes = encode_jpeg(raster, quality);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeFailure("write failed: " + path.string());
}

Raster read_image(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".png" || ext == ".PNG") return read_png(path);
    if (ext == ".jpg" || ext == ".jpeg" || ext == ".JPG") return read_jpeg(path);
    throw InvalidInput("unsupported image extension: " + path.string());
}

// ---------------------------------------------------------------------------
// Slide metadata + pyramid layout

SlideMeta read_slide_meta_json(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw InvalidInput("cannot open " + json_path.string());
    json j;
    in >> j;
    SlideMeta meta;
    meta.slide_id = j.at("slide_id").get<std::string>();
    meta.mpp = j.at("mpp").get<double>();
    for (const auto& lv : j.at("levels")) {
        meta.levels.push_back({lv.at("factor").get<double>(), lv.at("width").get<int>(),
                               lv.at("height").get<int>()});
    }
    meta.validate();
    return meta;
}

void write_slide_meta_json(const std::filesystem::path& json_path, const SlideMeta& meta) {
    json j;
    j["slide_id"] = meta.slide_id;
    j["mpp"] = meta.mpp;
    j["levels"] = json::array();
    for (const auto& lv : meta.levels)
        j["levels"].push_back({{"factor", lv.factor}, {"width", lv.width}, {"height", lv.height}});
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + json_path.string());
    out << j.dump(2) << "\n";
}

Slide open_slide(const std::filesystem::path& path) {
    Slide s;
    if (std::filesystem::is_directory(path)) {
        s.is_pyramid_dir = true;
        s.root = path;
        s.meta = read_slide_meta_json(path / "meta.json");
    } else {
        s.is_pyramid_dir = false;
        s.root = path;
        auto sidecar = path;
        sidecar.replace_extension(".json");
        s.meta = read_slide_meta_json(sidecar);
    }
    return s;
}

Raster Slide::read_level(int level_index) const {
    if (level_index < 0 || level_index >= static_cast<int>(meta.levels.size()))
        throw InvalidInput("slide '" + meta.slide_id + "': no level " +
                           std::to_string(level_index));
    if (is_pyramid_dir) {
        const auto p = root / ("level_" + std::to_string(level_index)) / "image.png";
        if (std::filesystem::exists(p)) return read_png(p);
        if (level_index == 0)
            throw InvalidInput("slide '" + meta.slide_id + "': missing level_0 image");
    } else if (level_index == 0) {
        return read_image(root);
    }
    // synthesise from level 0
    const Raster level0 = read_level(0);
    return resample(level0, meta.levels[level_index].factor, ResampleMethod::lanczos);
}

void write_slide_pyramid(const std::filesystem::path& dir, const SlideMeta& meta,
                         const std::vector<Raster>& level_images) {
    meta.validate();
    if (level_images.size() != meta.levels.size())
        throw InvalidInput("pyramid image count does not match declared levels");
    std::filesystem::create_directories(dir);
    write_slide_meta_json(dir / "meta.json", meta);
    for (std::size_t k = 0; k < level_images.size(); ++k) {
        const auto lvdir = dir / ("level_" + std::to_string(k));
        std::filesystem::create_directories(lvdir);
        write_png(lvdir / "image.png", level_images[k]);
    }
}

} // namespace emo
