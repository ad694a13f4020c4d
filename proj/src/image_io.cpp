#include "xlv/image_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

namespace xlv {

namespace {

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf env;
  char message[JMSG_LENGTH_MAX] = {0};
};

[[noreturn]] void jpeg_fail(j_common_ptr cinfo) {
  JpegErr* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->env, 1);
}

RawImage read_jpeg(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"),
                                                    &std::fclose);
  if (!f) throw std::runtime_error("image: cannot open " + path);

  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  if (setjmp(err.env)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("image: " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);

  RawImage img;
  img.height = cinfo.output_height;
  img.width = cinfo.output_width;
  img.channels = cinfo.output_components;
  img.pixels.resize(std::size_t(img.height * img.width * img.channels));
  const std::size_t stride = std::size_t(img.width * img.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = img.pixels.data() + stride * cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

RawImage read_png(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    throw std::runtime_error("image: " + path + ": " + im.message);
  const bool color = (im.format & PNG_FORMAT_FLAG_COLOR) != 0;
  im.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  RawImage img;
  img.height = im.height;
  img.width = im.width;
  img.channels = color ? 3 : 1;
  img.pixels.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw std::runtime_error("image: " + path + ": " + msg);
  }
  return img;
}

}  // namespace

RawImage read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("image: cannot open " + path);
  unsigned char magic[4] = {0};
  is.read(reinterpret_cast<char*>(magic), 4);
  is.close();
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return read_png(path);
  if (magic[0] == 0xff && magic[1] == 0xd8) return read_jpeg(path);
  throw std::runtime_error("image: " + path + " is neither PNG nor JPEG");
}

void write_png(const std::string& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3)
    throw std::invalid_argument("image: write_png supports 1 or 3 channels, got " +
                                std::to_string(image.channels));
  if (image.pixels.size() !=
      std::size_t(image.height * image.width * image.channels))
    throw std::invalid_argument("image: pixel buffer does not match dimensions");
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(image.width);
  im.height = static_cast<png_uint_32>(image.height);
  im.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw std::runtime_error("image: writing " + path + " failed: " + im.message);
}

}  // namespace xlv
