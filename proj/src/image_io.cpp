#include "wsisam/image_io.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace wsisam {

namespace {

struct ReadCursor {
  const std::string* bytes;
  size_t pos;
};

void png_write_to_string(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

void png_flush_noop(png_structp) {}

void png_read_from_string(png_structp png, png_bytep data, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(data, cur->bytes->data() + cur->pos, len);
  cur->pos += len;
}

// libpng is C; errors unwind via longjmp back into the calling frame.
void png_fail(png_structp png, png_const_charp msg) {
  auto* slot = static_cast<char*>(png_get_error_ptr(png));
  std::strncpy(slot, msg, 255);
  slot[255] = '\0';
  png_longjmp(png, 1);
}

std::string write_png(int rows, int cols, int color_type, int bit_depth, const std::vector<png_bytep>& row_ptrs) {
  char err[256] = {0};
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, png_fail, nullptr);
  if (!png) throw std::runtime_error("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InvalidArgument(std::string("png: ") + err);
  }
  png_set_write_fn(png, &out, png_write_to_string, png_flush_noop);
  png_set_IHDR(png, info, cols, rows, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(row_ptrs.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

struct Decoded {
  int rows = 0, cols = 0, channels = 0, bit_depth = 0;
  std::vector<uint8_t> raw;  // row-major, big-endian samples for 16-bit
};

Decoded read_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8)) {
    throw InvalidArgument("png: not a PNG stream");
  }
  char err[256] = {0};
  Decoded d;
  std::vector<png_bytep> rows;
  ReadCursor cur{&bytes, 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, png_fail, nullptr);
  if (!png) throw std::runtime_error("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InvalidArgument(std::string("png: ") + err);
  }
  png_set_read_fn(png, &cur, png_read_from_string);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  d.rows = static_cast<int>(png_get_image_height(png, info));
  d.cols = static_cast<int>(png_get_image_width(png, info));
  d.channels = png_get_channels(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  d.raw.resize(png_get_rowbytes(png, info) * d.rows);
  rows.resize(d.rows);
  for (int r = 0; r < d.rows; ++r) rows[r] = d.raw.data() + png_get_rowbytes(png, info) * r;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

std::string encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("encode_png: only 1 or 3 channels supported");
  const size_t stride = static_cast<size_t>(img.cols) * img.channels * 2;
  std::vector<uint8_t> buf(stride * img.rows);
  for (size_t i = 0; i < img.data.size(); ++i) {
    const double scaled = img.data[i] * kPngScale;
    if (scaled < 0.0 || scaled > 65535.0 || scaled != std::floor(scaled)) {
      throw InvalidArgument("encode_png: value " + std::to_string(img.data[i]) +
                            " is not exactly representable in 16-bit storage");
    }
    const auto v = static_cast<uint16_t>(scaled);
    buf[2 * i] = static_cast<uint8_t>(v >> 8);
    buf[2 * i + 1] = static_cast<uint8_t>(v & 0xff);
  }
  std::vector<png_bytep> rows(img.rows);
  for (int r = 0; r < img.rows; ++r) rows[r] = buf.data() + stride * r;
  return write_png(img.rows, img.cols, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 16, rows);
}

Image decode_png(const std::string& bytes) {
  Decoded d = read_png(bytes);
  Image img(d.rows, d.cols, d.channels);
  if (d.bit_depth == 16) {
    for (size_t i = 0; i < img.data.size(); ++i) {
      const uint16_t v = static_cast<uint16_t>(d.raw[2 * i] << 8 | d.raw[2 * i + 1]);
      img.data[i] = v / kPngScale;
    }
  } else {
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = d.raw[i];
  }
  return img;
}

std::string encode_mask_png(const Mask& m) {
  std::vector<uint8_t> buf(m.data.size());
  for (size_t i = 0; i < m.data.size(); ++i) buf[i] = m.data[i] ? 255 : 0;
  std::vector<png_bytep> rows(m.rows);
  for (int r = 0; r < m.rows; ++r) rows[r] = buf.data() + static_cast<size_t>(m.cols) * r;
  return write_png(m.rows, m.cols, PNG_COLOR_TYPE_GRAY, 8, rows);
}

Mask decode_mask_png(const std::string& bytes) {
  Decoded d = read_png(bytes);
  Mask m(d.rows, d.cols);
  const int bytes_per_sample = d.bit_depth == 16 ? 2 : 1;
  for (int r = 0; r < d.rows; ++r) {
    for (int c = 0; c < d.cols; ++c) {
      bool any = false;
      for (int ch = 0; ch < d.channels * bytes_per_sample; ++ch) {
        any = any || d.raw[(static_cast<size_t>(r) * d.cols + c) * d.channels * bytes_per_sample + ch];
      }
      m.at(r, c) = any ? 1 : 0;
    }
  }
  return m;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + p.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void save_pyramid(const std::filesystem::path& dir, const PyramidImage& pyr) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "wsisam-pyramid";
  meta["version"] = 1;
  meta["id"] = pyr.id;
  meta["n_levels"] = pyr.n_levels();
  meta["seed"] = pyr.seed;
  meta["generator"] = pyr.generator_config.empty() ? nlohmann::json(nullptr)
                                                   : nlohmann::json::parse(pyr.generator_config);
  meta["dims"] = nlohmann::json::array();
  for (int k = 0; k < pyr.n_levels(); ++k) {
    const auto& lvl = pyr.levels[k];
    meta["dims"].push_back({lvl.rows, lvl.cols, lvl.channels});
    write_file(dir / ("level_" + std::to_string(k) + ".png"), encode_png(lvl));
    write_file(dir / ("mask_" + std::to_string(k) + ".png"), encode_mask_png(pyr.gt_levels[k]));
  }
  meta["objects"] = nlohmann::json::array();
  for (const auto& o : pyr.objects) {
    meta["objects"].push_back(
        {{"center", {o.center_row, o.center_col}}, {"radius", o.radius}, {"family", to_string(o.family)}});
  }
  write_file(dir / "meta.json", meta.dump(2));
}

PyramidImage load_pyramid(const std::filesystem::path& dir) {
  auto meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  if (meta.value("format", "") != "wsisam-pyramid") throw InvalidArgument("load_pyramid: unknown format in " + dir.string());
  if (meta.value("version", 0) != 1) throw InvalidArgument("load_pyramid: unsupported version in " + dir.string());
  PyramidImage pyr;
  pyr.id = meta.at("id").get<std::string>();
  pyr.seed = meta.value("seed", uint64_t{0});
  if (!meta["generator"].is_null()) pyr.generator_config = meta["generator"].dump();
  const int n = meta.at("n_levels").get<int>();
  for (int k = 0; k < n; ++k) {
    pyr.levels.push_back(decode_png(read_file(dir / ("level_" + std::to_string(k) + ".png"))));
    pyr.gt_levels.push_back(decode_mask_png(read_file(dir / ("mask_" + std::to_string(k) + ".png"))));
  }
  for (const auto& o : meta.value("objects", nlohmann::json::array())) {
    pyr.objects.push_back(ObjectInfo{o["center"][0].get<int>(), o["center"][1].get<int>(), o["radius"].get<double>(),
                                     family_from_string(o["family"].get<std::string>())});
  }
  return pyr;
}

void save_dataset(const std::filesystem::path& out, const std::vector<PyramidImage>& data) {
  std::filesystem::create_directories(out);
  for (const auto& pyr : data) save_pyramid(out / pyr.id, pyr);
}

std::vector<PyramidImage> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InvalidArgument("load_dataset: '" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json")) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  std::vector<PyramidImage> out;
  for (const auto& d : subdirs) out.push_back(load_pyramid(d));
  return out;
}

}  // namespace wsisam
