#include "cloak/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <sstream>

#include "cloak/errors.hpp"

namespace cloak {

using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

std::uint16_t to16(double v) {
    const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5;
    return static_cast<std::uint16_t>(std::lround(u * 65535.0));
}

double from16(std::uint16_t q) { return static_cast<double>(q) / 65535.0 * 2.0 - 1.0; }

void write_png_rows(const fs::path& path, int width, int height, int color_type, int depth,
                    const std::vector<std::vector<unsigned char>>& rows, const PngText& text) {
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG write failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, width, height, depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_text> chunks(text.size());
    std::size_t k = 0;
    for (const auto& [key, value] : text) {
        chunks[k].compression = PNG_TEXT_COMPRESSION_NONE;
        chunks[k].key = const_cast<char*>(key.c_str());
        chunks[k].text = const_cast<char*>(value.c_str());
        chunks[k].text_length = value.size();
        ++k;
    }
    if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
    png_write_info(png, info);
    for (const auto& row : rows) png_write_row(png, row.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(const std::string& s, std::size_t& pos) {
    if (pos + 4 > s.size()) throw IntegrityError("archive truncated");
    std::uint32_t v;
    std::memcpy(&v, s.data() + pos, 4);
    pos += 4;
    return v;
}

constexpr char kMagic[4] = {'C', 'L', 'K', '1'};

std::string serialize(const ArrayMap& arrays) {
    std::string out(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, t] : arrays) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
    }
    return out;
}

ArrayMap deserialize(const std::string& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IntegrityError("bad archive header");
    std::size_t pos = 4;
    const std::uint32_t count = get_u32(bytes, pos);
    ArrayMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t nlen = get_u32(bytes, pos);
        if (pos + nlen > bytes.size()) throw IntegrityError("archive truncated");
        std::string name = bytes.substr(pos, nlen);
        pos += nlen;
        const std::uint32_t rank = get_u32(bytes, pos);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(get_u32(bytes, pos));
        Tensor t(shape);
        const std::size_t nbytes = t.numel() * sizeof(double);
        if (pos + nbytes > bytes.size()) throw IntegrityError("archive truncated");
        std::memcpy(t.data(), bytes.data() + pos, nbytes);
        pos += nbytes;
        out.emplace(std::move(name), std::move(t));
    }
    if (pos != bytes.size()) throw IntegrityError("trailing bytes in archive");
    return out;
}

fs::path with_ext(const fs::path& stem, const char* ext) {
    fs::path p = stem;
    p += ext;
    return p;
}

}  // namespace

double quantize16(double v) { return from16(to16(v)); }

void write_png(const fs::path& path, const Tensor& image, const PngText& text) {
    if (image.rank() != 3 || image.dim(0) != kImageChannels) throw ArgumentError("write_png expects [3, H, W]");
    const int H = image.dim(1), W = image.dim(2);
    std::vector<std::vector<unsigned char>> rows(H, std::vector<unsigned char>(static_cast<std::size_t>(W) * 6));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const std::uint16_t q = to16(image[(static_cast<std::size_t>(c) * H + y) * W + x]);
                rows[y][x * 6 + c * 2] = static_cast<unsigned char>(q >> 8);
                rows[y][x * 6 + c * 2 + 1] = static_cast<unsigned char>(q & 0xFF);
            }
    write_png_rows(path, W, H, PNG_COLOR_TYPE_RGB, 16, rows, text);
}

PngText read_png_text(const fs::path& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("PNG read failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_textp chunks = nullptr;
    const int n = png_get_text(png, info, &chunks, nullptr);
    PngText out;
    for (int i = 0; i < n; ++i) out[chunks[i].key] = std::string(chunks[i].text, chunks[i].text_length);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png_gray(const fs::path& path, const Tensor& image, const PngText& text) {
    if (image.rank() != 2) throw ArgumentError("write_png_gray expects [H, W]");
    const int H = image.dim(0), W = image.dim(1);
    std::vector<std::vector<unsigned char>> rows(H, std::vector<unsigned char>(W));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            rows[y][x] = static_cast<unsigned char>(
                std::lround(std::clamp(image[static_cast<std::size_t>(y) * W + x], 0.0, 1.0) * 255.0));
    write_png_rows(path, W, H, PNG_COLOR_TYPE_GRAY, 8, rows, text);
}

Tensor read_png(const fs::path& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("PNG read failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const int W = static_cast<int>(png_get_image_width(png, info));
    const int H = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth < 8) png_set_packing(png);
    if (depth == 8 || depth < 8) png_set_expand_16(png);
    png_read_update_info(png, info);
    std::vector<std::vector<unsigned char>> rows(H, std::vector<unsigned char>(png_get_rowbytes(png, info)));
    for (auto& row : rows) png_read_row(png, row.data(), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    Tensor out({kImageChannels, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const std::uint16_t q = static_cast<std::uint16_t>((rows[y][x * 6 + c * 2] << 8) | rows[y][x * 6 + c * 2 + 1]);
                out[(static_cast<std::size_t>(c) * H + y) * W + x] = from16(q);
            }
    return out;
}

std::string arrays_digest(const ArrayMap& arrays) { return sha256_hex(serialize(arrays)); }

ArchiveManifest save_archive(const fs::path& stem, const ArrayMap& arrays, const std::string& config_hash,
                             const std::map<std::string, std::string>& meta) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    const std::string bytes = serialize(arrays);
    ArchiveManifest m;
    for (const auto& [name, t] : arrays) m.arrays.emplace_back(name, t.shape());
    m.config_hash = config_hash;
    m.digest = sha256_hex(bytes);
    m.meta = meta;
    {
        std::ofstream out(with_ext(stem, ".bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("cannot write " + with_ext(stem, ".bin").string());
    }
    json j;
    j["format"] = "cloak-archive-1";
    j["config_hash"] = m.config_hash;
    j["digest"] = m.digest;
    j["meta"] = m.meta;
    json arr = json::array();
    for (const auto& [name, shape] : m.arrays) arr.push_back({{"name", name}, {"shape", shape}});
    j["arrays"] = arr;
    write_text(with_ext(stem, ".json"), j.dump(2) + "\n");
    return m;
}

ArrayMap load_archive(const fs::path& stem, ArchiveManifest* manifest) {
    json j;
    try {
        j = json::parse(read_text(with_ext(stem, ".json")));
    } catch (const json::exception& e) {
        throw IntegrityError("unreadable manifest " + with_ext(stem, ".json").string() + ": " + e.what());
    }
    const std::string bytes = read_text(with_ext(stem, ".bin"));
    const std::string digest = j.value("digest", "");
    if (sha256_hex(bytes) != digest) throw IntegrityError("digest mismatch for " + with_ext(stem, ".bin").string());
    ArrayMap arrays = deserialize(bytes);
    if (manifest) {
        manifest->arrays.clear();
        for (const auto& [name, t] : arrays) manifest->arrays.emplace_back(name, t.shape());
        manifest->config_hash = j.value("config_hash", "");
        manifest->digest = digest;
        manifest->meta = j.value("meta", std::map<std::string, std::string>{});
    }
    return arrays;
}

void write_image_batch(const fs::path& dir, const std::string& prefix, const ImageBatch& batch,
                       const std::string& config_hash, const std::map<std::string, std::string>& meta,
                       const Tensor* png_pixels) {
    if (png_pixels && png_pixels->shape() != batch.pixels.shape())
        throw ArgumentError("png_pixels must match the batch shape");
    fs::create_directories(dir);
    const ImageBatch shown{png_pixels ? *png_pixels : batch.pixels, batch.labels};
    for (int i = 0; i < batch.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "_%03d.png", i);
        write_png(dir / (prefix + name), shown.image(i), {{"config_hash", config_hash}});
    }
    Tensor labels({static_cast<int>(batch.labels.size())});
    for (std::size_t i = 0; i < batch.labels.size(); ++i) labels[i] = batch.labels[i];
    save_archive(dir / prefix, {{"pixels", batch.pixels}, {"labels", labels}}, config_hash, meta);
}

ImageBatch read_image_batch(const fs::path& dir, const std::string& prefix) {
    ArrayMap arrays = load_archive(dir / prefix);
    if (!arrays.count("pixels") || !arrays.count("labels")) throw IntegrityError("image archive lacks pixels/labels");
    ImageBatch b;
    b.pixels = std::move(arrays["pixels"]);
    for (double v : arrays["labels"].values()) b.labels.push_back(static_cast<int>(v));
    return b;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        const std::string& f = fields[i];
        if (f.find_first_of(",\"\n") == std::string::npos) {
            out += f;
            continue;
        }
        out += '"';
        for (char c : f) {
            if (c == '"') out += '"';
            out += c;
        }
        out += '"';
    }
    return out;
}

std::vector<std::string> csv_split(const std::string& line, int line_number) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", line_number);
    out.push_back(std::move(cur));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace cloak
