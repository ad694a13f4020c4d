#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <jpeglib.h>

#include "doctest.h"
#include "xlv/dataset.hpp"
#include "xlv/image_io.hpp"
#include "xlv/rng.hpp"

using namespace xlv;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& stem)
      : path(fs::temp_directory_path() / stem) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RawImage solid(Index h, Index w, Index c, unsigned char v) {
  RawImage img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.pixels.assign(std::size_t(h * w * c), v);
  return img;
}

void write_jpeg_fixture(const std::string& path, const RawImage& img, int quality) {
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = static_cast<int>(img.channels);
  cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = std::size_t(img.width * img.channels);
  while (cinfo.next_scanline < cinfo.image_height) {
    const unsigned char* row = img.pixels.data() + stride * cinfo.next_scanline;
    JSAMPROW rows[1] = {const_cast<JSAMPROW>(row)};
    jpeg_write_scanlines(&cinfo, rows, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

// Independent straight-line resampler (long double, center-aligned
// convention) used as the oracle for preprocess's bilinear path.
std::vector<long double> ref_bilinear(const std::vector<long double>& src, Index h,
                                      Index w, Index oh, Index ow) {
  std::vector<long double> out(std::size_t(oh * ow));
  for (Index r = 0; r < oh; ++r)
    for (Index c = 0; c < ow; ++c) {
      long double y = (r + 0.5L) * (long double)(h) / oh - 0.5L;
      long double x = (c + 0.5L) * (long double)(w) / ow - 0.5L;
      y = std::clamp(y, 0.0L, (long double)(h - 1));
      x = std::clamp(x, 0.0L, (long double)(w - 1));
      Index y0 = Index(std::floor((double)y)), x0 = Index(std::floor((double)x));
      Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      long double fy = y - y0, fx = x - x0;
      auto at = [&](Index rr, Index cc) { return src[std::size_t(rr * w + cc)]; };
      out[std::size_t(r * ow + c)] =
          (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
          fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
  return out;
}

}  // namespace

TEST_CASE("png write/read round-trips exactly") {
  TempDir dir("xlv_io_png");
  RawImage img = solid(5, 7, 1, 0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<unsigned char>((i * 37) % 256);
  std::string p = (dir.path / "x.png").string();
  write_png(p, img);
  RawImage back = read_image(p);
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(back.channels == 1);
  CHECK(back.pixels == img.pixels);

  RawImage rgb = solid(4, 4, 3, 0);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i)
    rgb.pixels[i] = static_cast<unsigned char>((i * 11) % 256);
  std::string p3 = (dir.path / "rgb.png").string();
  write_png(p3, rgb);
  RawImage back3 = read_image(p3);
  CHECK(back3.channels == 3);
  CHECK(back3.pixels == rgb.pixels);
}

TEST_CASE("jpeg decodes near-losslessly at high quality") {
  TempDir dir("xlv_io_jpeg");
  RawImage img = solid(16, 16, 1, 128);
  std::string p = (dir.path / "gray.jpg").string();
  write_jpeg_fixture(p, img, 95);
  RawImage back = read_image(p);
  CHECK(back.channels == 1);
  REQUIRE(back.pixels.size() == img.pixels.size());
  for (std::size_t i = 0; i < back.pixels.size(); ++i)
    CHECK(std::abs(int(back.pixels[i]) - 128) <= 2);

  RawImage rgb = solid(8, 8, 3, 200);
  std::string p3 = (dir.path / "rgb.jpg").string();
  write_jpeg_fixture(p3, rgb, 95);
  RawImage back3 = read_image(p3);
  CHECK(back3.channels == 3);
}

TEST_CASE("unreadable and non-image files are rejected with the path") {
  TempDir dir("xlv_io_bad");
  CHECK_THROWS_WITH_AS((void)read_image((dir.path / "missing.png").string()),
                       doctest::Contains("missing.png"), std::runtime_error);
  std::string junk = (dir.path / "junk.png").string();
  std::ofstream(junk) << "this is text";
  CHECK_THROWS_WITH_AS((void)read_image(junk),
                       doctest::Contains("neither PNG nor JPEG"),
                       std::runtime_error);
}

TEST_CASE("directory manifest enumerates deterministically") {
  TempDir dir("xlv_ds_tree");
  for (const char* cls : {"angry", "happy"}) {
    fs::create_directories(dir.path / cls);
    for (int i = 0; i < 2; ++i)
      write_png((dir.path / cls / (std::to_string(i) + ".png")).string(),
                solid(8, 8, 1, static_cast<unsigned char>(40 * (i + 1))));
  }
  std::ofstream(dir.path / "angry" / "notes.txt") << "ignored";

  DatasetManifest m = load_manifest(dir.path.string());
  CHECK(m.classes == std::vector<std::string>{"angry", "happy"});
  REQUIRE(m.records.size() == 4);
  CHECK(m.records[0].label == 0);
  CHECK(m.records[3].label == 1);
  for (std::size_t i = 1; i < m.records.size(); ++i)
    CHECK(m.records[i - 1].path < m.records[i].path);

  DatasetManifest again = load_manifest(dir.path.string());
  REQUIRE(again.records.size() == m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    CHECK(again.records[i].path == m.records[i].path);
    CHECK(again.records[i].label == m.records[i].label);
  }
}

TEST_CASE("declared label maps pin class order and reject strangers") {
  TempDir dir("xlv_ds_declared");
  // raf-db order puts surprise first even though 'happy' sorts earlier
  for (const char* cls : {"happy", "surprise"}) {
    fs::create_directories(dir.path / cls);
    write_png((dir.path / cls / "0.png").string(), solid(8, 8, 1, 99));
  }
  const LabelMap& raf = label_map("raf-db");
  DatasetManifest m = load_manifest(dir.path.string(), &raf);
  CHECK(m.classes.size() == 7);
  CHECK(m.classes[0] == "surprise");
  for (const auto& r : m.records)
    CHECK((r.label == 0 || r.label == 3));  // surprise=0, happy=3

  fs::create_directories(dir.path / "bored");
  write_png((dir.path / "bored" / "0.png").string(), solid(8, 8, 1, 1));
  CHECK_THROWS_WITH_AS((void)load_manifest(dir.path.string(), &raf),
                       doctest::Contains("bored"), std::runtime_error);
}

TEST_CASE("raf-db-shaped train splits warn when the size is off") {
  TempDir dir("xlv_ds_warn");
  for (const auto& cls : label_map("raf-db").classes) {
    fs::create_directories(dir.path / cls);
    write_png((dir.path / cls / "0.png").string(), solid(8, 8, 1, 77));
  }
  DatasetManifest m = load_manifest(dir.path.string());
  CHECK(m.classes.size() == 7);
  REQUIRE(m.warnings.size() == 1);
  CHECK(m.warnings[0].find("12271") != std::string::npos);

  DatasetManifest val = load_manifest(dir.path.string(), nullptr, "val");
  CHECK(val.warnings.empty());
}

TEST_CASE("csv manifests resolve paths and validate labels") {
  TempDir dir("xlv_ds_csv");
  fs::create_directories(dir.path / "imgs");
  write_png((dir.path / "imgs" / "a.png").string(), solid(8, 8, 1, 10));
  write_png((dir.path / "imgs" / "b.png").string(), solid(8, 8, 1, 20));
  std::string csv = (dir.path / "manifest.csv").string();
  std::ofstream(csv) << "path,label\nimgs/a.png,happy\nimgs/b.png,anger\n";

  DatasetManifest m = load_manifest(csv);
  CHECK(m.classes == std::vector<std::string>{"anger", "happy"});
  REQUIRE(m.records.size() == 2);
  CHECK(m.records[0].label == 1);  // a.png sorts first, labeled happy
  CHECK(m.records[1].label == 0);

  const LabelMap& ck = label_map("ck+");
  DatasetManifest declared = load_manifest(csv, &ck);
  CHECK(declared.classes.size() == 7);

  std::string bad = (dir.path / "bad.csv").string();
  std::ofstream(bad) << "path,label\nimgs/a.png,zombie\n";
  CHECK_THROWS_WITH_AS((void)load_manifest(bad, &ck), doctest::Contains("zombie"),
                       std::runtime_error);

  std::string dup = (dir.path / "dup.csv").string();
  std::ofstream(dup) << "path,label\nimgs/a.png,happy\nimgs/a.png,anger\n";
  CHECK_THROWS_WITH_AS((void)load_manifest(dup), doctest::Contains("duplicate"),
                       std::runtime_error);

  std::string ghost = (dir.path / "ghost.csv").string();
  std::ofstream(ghost) << "path,label\nimgs/zzz.png,happy\n";
  CHECK_THROWS_WITH_AS((void)load_manifest(ghost), doctest::Contains("zzz.png"),
                       std::runtime_error);

  std::string headerless = (dir.path / "noheader.csv").string();
  std::ofstream(headerless) << "imgs/a.png,happy\n";
  CHECK_THROWS_AS((void)load_manifest(headerless), std::runtime_error);
}

TEST_CASE("empty or missing sources are rejected") {
  TempDir dir("xlv_ds_empty");
  CHECK_THROWS_WITH_AS((void)load_manifest((dir.path / "nope").string()),
                       doctest::Contains("does not exist"), std::runtime_error);
  fs::create_directories(dir.path / "emptycls");
  CHECK_THROWS_WITH_AS((void)load_manifest(dir.path.string()),
                       doctest::Contains("no samples"), std::runtime_error);
}

TEST_CASE("preprocess scales, converts channels, and normalizes") {
  PreprocessOptions opt;
  opt.height = opt.width = 8;
  opt.channels = 1;
  Tensor<float> gray = preprocess(solid(8, 8, 1, 128), opt);
  CHECK(gray.shape() == Shape{8, 8, 1});
  for (Index i = 0; i < gray.size(); ++i)
    CHECK(gray.data()[i] == doctest::Approx(128.0f / 255.0f).epsilon(1e-7));

  // rgb -> luma
  RawImage rgb = solid(8, 8, 3, 0);
  for (Index i = 0; i < 64; ++i) {
    rgb.pixels[std::size_t(3 * i)] = 255;  // pure red
    rgb.pixels[std::size_t(3 * i + 1)] = 0;
    rgb.pixels[std::size_t(3 * i + 2)] = 0;
  }
  Tensor<float> luma = preprocess(rgb, opt);
  for (Index i = 0; i < luma.size(); ++i)
    CHECK(luma.data()[i] == doctest::Approx(0.299f).epsilon(1e-6));

  // gray -> replicated rgb
  opt.channels = 3;
  Tensor<float> rep = preprocess(solid(8, 8, 1, 51), opt);
  CHECK(rep.shape() == Shape{8, 8, 3});
  for (Index i = 0; i < rep.size(); ++i)
    CHECK(rep.data()[i] == doctest::Approx(0.2f).epsilon(1e-6));

  // normalization constants
  opt.channels = 1;
  opt.mean = {0.5f};
  opt.stddev = {0.25f};
  Tensor<float> normed = preprocess(solid(8, 8, 1, 255), opt);
  for (Index i = 0; i < normed.size(); ++i)
    CHECK(normed.data()[i] == doctest::Approx(2.0f).epsilon(1e-6));

  opt.mean = {0.5f, 0.5f};  // wrong arity
  CHECK_THROWS_AS((void)preprocess(solid(8, 8, 1, 0), opt), std::invalid_argument);
}

TEST_CASE("identity resize copies pixels exactly and stays in [0,1]") {
  Rng rng(3);
  RawImage img = solid(12, 9, 1, 0);
  for (auto& p : img.pixels)
    p = static_cast<unsigned char>(rng.integer(0, 255));
  PreprocessOptions opt;
  opt.height = 12;
  opt.width = 9;
  Tensor<float> out = preprocess(img, opt);
  for (Index i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == float(img.pixels[std::size_t(i)]) / 255.0f);

  for (bool bilinear : {true, false}) {
    PreprocessOptions o2;
    o2.height = 5;
    o2.width = 17;
    o2.bilinear = bilinear;
    Tensor<float> r = preprocess(img, o2);
    CHECK(r.shape() == Shape{5, 17, 1});
    for (Index i = 0; i < r.size(); ++i) {
      CHECK(r.data()[i] >= 0.0f);
      CHECK(r.data()[i] <= 1.0f);
    }
  }
}

TEST_CASE("checkerboard downscale matches the reference resampler") {
  const Index h = 16, w = 16;
  RawImage img = solid(h, w, 1, 0);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      img.pixels[std::size_t(r * w + c)] = ((r + c) % 2) ? 255 : 0;

  std::vector<long double> src(std::size_t(h * w));
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = img.pixels[i] / 255.0L;

  for (Index target : {Index(4), Index(7), Index(12)}) {
    PreprocessOptions opt;
    opt.height = opt.width = target;
    Tensor<float> got = preprocess(img, opt);
    auto want = ref_bilinear(src, h, w, target, target);
    for (Index i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - float(want[std::size_t(i)])) < 1e-6f);
  }
}

TEST_CASE("synthetic dataset is deterministic and class-separated") {
  SynthSpec spec;
  spec.classes = 8;
  spec.per_class = 4;
  spec.size = 16;
  spec.seed = 7;
  auto a = synth_dataset(spec);
  auto b = synth_dataset(spec);
  REQUIRE(a.size() == 32);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].source == b[i].source);
    CHECK(std::memcmp(a[i].image.data(), b[i].image.data(),
                      sizeof(float) * std::size_t(a[i].image.size())) == 0);
  }
  for (const auto& s : a)
    for (Index i = 0; i < s.image.size(); ++i) {
      CHECK(s.image.data()[i] >= 0.0f);
      CHECK(s.image.data()[i] <= 1.0f);
    }

  SynthSpec clean = spec;
  clean.noise = 0.0;
  auto c = synth_dataset(clean);
  for (std::size_t i = 1; i < 4; ++i)
    CHECK(std::memcmp(c[0].image.data(), c[i].image.data(),
                      sizeof(float) * std::size_t(c[0].image.size())) == 0);

  // class-conditional means differ pairwise
  const Index px = spec.size * spec.size;
  std::vector<std::vector<double>> mean(8, std::vector<double>(std::size_t(px), 0));
  for (const auto& s : a)
    for (Index i = 0; i < px; ++i)
      mean[std::size_t(s.label)][std::size_t(i)] +=
          s.image.data()[i] / double(spec.per_class);
  for (int i = 0; i < 8; ++i)
    for (int j = i + 1; j < 8; ++j) {
      double d2 = 0;
      for (Index k = 0; k < px; ++k) {
        double d = mean[std::size_t(i)][std::size_t(k)] -
                   mean[std::size_t(j)][std::size_t(k)];
        d2 += d * d;
      }
      CAPTURE(i);
      CAPTURE(j);
      CHECK(std::sqrt(d2) > 0.5);
    }

  SynthSpec bad = spec;
  bad.classes = 9;
  CHECK_THROWS_AS((void)synth_dataset(bad), std::invalid_argument);
  bad.classes = 1;
  CHECK_THROWS_AS((void)synth_dataset(bad), std::invalid_argument);
}

TEST_CASE("3-nearest-neighbor pixel baseline learns the synthetic classes") {
  SynthSpec spec;
  spec.classes = 3;
  spec.per_class = 48;  // 32 train + 16 held out per class
  spec.size = 32;
  spec.seed = 7;
  auto all = synth_dataset(spec);
  std::vector<const Sample*> train, heldout;
  std::vector<Index> seen(3, 0);
  for (const auto& s : all)
    (seen[std::size_t(s.label)]++ < 32 ? train : heldout).push_back(&s);
  REQUIRE(train.size() == 96);
  REQUIRE(heldout.size() == 48);

  int correct = 0;
  for (const Sample* q : heldout) {
    std::vector<std::pair<double, Index>> dist;
    for (const Sample* t : train) {
      double d2 = 0;
      for (Index i = 0; i < q->image.size(); ++i) {
        double d = double(q->image.data()[i]) - double(t->image.data()[i]);
        d2 += d * d;
      }
      dist.emplace_back(d2, t->label);
    }
    std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
    int votes[3] = {0, 0, 0};
    for (int k = 0; k < 3; ++k) votes[dist[std::size_t(k)].second]++;
    Index pred = Index(std::max_element(votes, votes + 3) - votes);
    correct += (pred == q->label);
  }
  double acc = double(correct) / double(heldout.size());
  CHECK(acc > 0.9);
}

TEST_CASE("synth tree writes PNGs that reload consistently") {
  TempDir dir("xlv_ds_synthtree");
  SynthSpec spec;
  spec.classes = 3;
  spec.per_class = 2;
  spec.size = 16;
  auto samples = synth_dataset(spec);
  auto classes = synth_class_names(3);
  write_synth_tree(dir.path.string(), samples, classes);

  PreprocessOptions opt;
  opt.height = opt.width = 16;
  LoadedDataset back = load_dataset(dir.path.string(), opt);
  CHECK(back.classes == classes);  // c0-bar < c1-arc < c2-blob lexicographically
  REQUIRE(back.samples.size() == samples.size());
  std::vector<Index> counts(3, 0);
  for (const auto& s : back.samples) counts[std::size_t(s.label)]++;
  CHECK(counts == std::vector<Index>{2, 2, 2});
  // 8-bit quantization bounds the pixel error
  double worst = 0;
  for (std::size_t ci = 0; ci < 3; ++ci) {
    const Sample& orig = samples[ci * 2];  // first sample of class ci
    const Sample* re = nullptr;
    for (const auto& s : back.samples)
      if (s.label == Index(ci) && s.source.find("000.png") != std::string::npos)
        re = &s;
    REQUIRE(re != nullptr);
    for (Index i = 0; i < orig.image.size(); ++i)
      worst = std::max(worst,
                       std::abs(double(orig.image.data()[i]) - re->image.data()[i]));
  }
  CHECK(worst <= 0.5 / 255.0 + 1e-6);
}

TEST_CASE("synth uri parses and respects the requested geometry") {
  PreprocessOptions opt;
  opt.height = opt.width = 16;
  LoadedDataset d = load_dataset("synth:k=4,n=3,seed=11,noise=0.05", opt);
  CHECK(d.classes.size() == 4);
  CHECK(d.samples.size() == 12);
  CHECK(d.samples[0].image.shape() == Shape{16, 16, 1});

  CHECK_THROWS_AS((void)load_dataset("synth:k=4,zebra=1", opt),
                  std::invalid_argument);
  PreprocessOptions rgb = opt;
  rgb.channels = 3;
  CHECK_THROWS_AS((void)load_dataset("synth:k=3", rgb), std::invalid_argument);
}
