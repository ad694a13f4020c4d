#include <doctest.h>

#include <string>

#include "fd.hpp"
#include "xlv/patch_embed.hpp"
#include "xlv/rng.hpp"

using xlv::Index;
using xlv::Shape;
using T = xlv::Tensor<double>;

namespace {

T rand_image(xlv::Rng& rng, Index h, Index w, Index c) {
  T img = T::zeros({h, w, c});
  for (Index i = 0; i < img.size(); ++i) img.mutable_data()[i] = rng.uniform(0, 1);
  return img;
}

// Inverse of patchify, used only to verify the forward cut is lossless.
T unpatchify(const xlv::PatchSequence<double>& ps, Index patch, Index c) {
  Index h = ps.grid_rows * patch, w = ps.grid_cols * patch;
  T img = T::zeros({h, w, c});
  for (Index r = 0; r < ps.grid_rows; ++r)
    for (Index col = 0; col < ps.grid_cols; ++col) {
      Index tok = r * ps.grid_cols + col;
      Index e = 0;
      for (Index pr = 0; pr < patch; ++pr)
        for (Index pc = 0; pc < patch; ++pc)
          for (Index ch = 0; ch < c; ++ch, ++e)
            img.mutable_data()[((r * patch + pr) * w + (col * patch + pc)) * c + ch] =
                ps.tokens.at(tok, e);
    }
  return img;
}

}  // namespace

TEST_CASE("patch grid arithmetic") {
  T img = T::zeros({224, 224, 3});
  auto ps = xlv::patchify(img, 16);
  CHECK(ps.tokens.rows() == 196);
  CHECK(ps.tokens.cols() == 768);
  CHECK(ps.grid_rows == 14);
  CHECK(ps.grid_cols == 14);
}

TEST_CASE("unit patches reproduce pixels in row-major order") {
  T img = T::from({2, 2, 1}, {10, 20, 30, 40});
  auto ps = xlv::patchify(img, 1);
  CHECK(ps.tokens.rows() == 4);
  CHECK(ps.tokens.cols() == 1);
  CHECK(ps.tokens.at(0, 0) == 10);
  CHECK(ps.tokens.at(1, 0) == 20);
  CHECK(ps.tokens.at(2, 0) == 30);
  CHECK(ps.tokens.at(3, 0) == 40);
}

TEST_CASE("indivisible sizes are rejected with both values named") {
  T img = T::zeros({10, 16, 1});
  try {
    xlv::patchify(img, 16);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("10") != std::string::npos);
    CHECK(msg.find("16") != std::string::npos);
  }
}

TEST_CASE("patchify then unpatchify is bit-exact") {
  xlv::Rng rng(31);
  for (Index patch : {Index(2), Index(4)}) {
    T img = rand_image(rng, 8, 12, 3);
    auto ps = xlv::patchify(img, patch);
    T back = unpatchify(ps, patch, 3);
    REQUIRE(back.size() == img.size());
    for (Index i = 0; i < img.size(); ++i) CHECK(back.at(i) == img.at(i));
  }
}

TEST_CASE("identity projection with zero positions passes patches through") {
  xlv::Rng rng(32);
  T img = rand_image(rng, 4, 4, 1);
  auto ps = xlv::patchify(img, 2);  // patch length 4
  T proj = T::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  T pos = T::zeros({4, 4});
  auto tokens = xlv::embed(ps, proj, pos);
  CHECK(tokens.grid_rows == 2);
  CHECK(tokens.grid_cols == 2);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j)
      CHECK(tokens.tokens.at(i, j) == doctest::Approx(ps.tokens.at(i, j)));
}

TEST_CASE("zero patches pass the positional table through") {
  xlv::Rng rng(33);
  T img = T::zeros({4, 4, 1});
  auto ps = xlv::patchify(img, 2);
  T proj = rand_image(rng, 4, 8, 1);
  proj = xlv::reshape(proj, {4, 8});
  T pos = xlv::reshape(rand_image(rng, 4, 8, 1), {4, 8});
  auto tokens = xlv::embed(ps, proj, pos);
  for (Index i = 0; i < tokens.tokens.size(); ++i)
    CHECK(tokens.tokens.at(i) == pos.at(i));
}

TEST_CASE("embed matches an independent matrix oracle") {
  xlv::Rng rng(34);
  T img = rand_image(rng, 6, 6, 2);
  auto ps = xlv::patchify(img, 3);  // 4 tokens of length 18
  T proj = xlv::reshape(rand_image(rng, 18, 5, 1), {18, 5});
  T pos = xlv::reshape(rand_image(rng, 4, 5, 1), {4, 5});
  auto tokens = xlv::embed(ps, proj, pos);

  for (Index t = 0; t < 4; ++t)
    for (Index d = 0; d < 5; ++d) {
      double acc = pos.at(t, d);
      for (Index e = 0; e < 18; ++e) acc += ps.tokens.at(t, e) * proj.at(e, d);
      CHECK(std::abs(tokens.tokens.at(t, d) - acc) < 1e-12);
    }
}

TEST_CASE("swapping two patches swaps exactly the two matching tokens") {
  xlv::Rng rng(35);
  T img = rand_image(rng, 4, 4, 1);
  auto proj = xlv::reshape(rand_image(rng, 4, 6, 1), {4, 6});
  T pos = T::zeros({4, 6});

  auto base = xlv::embed(xlv::patchify(img, 2), proj, pos);

  // swap patches 1 and 2 at the pixel level
  T swapped = xlv::detach(img);
  auto ps = xlv::patchify(img, 2);
  for (Index pr = 0; pr < 2; ++pr)
    for (Index pc = 0; pc < 2; ++pc) {
      // patch 1 = grid (0,1) top-right; patch 2 = grid (1,0) bottom-left
      Index a = (pr * 4 + 2 + pc);
      Index b = ((2 + pr) * 4 + pc);
      std::swap(swapped.mutable_data()[a], swapped.mutable_data()[b]);
    }
  auto moved = xlv::embed(xlv::patchify(swapped, 2), proj, pos);

  for (Index d = 0; d < 6; ++d) {
    CHECK(moved.tokens.at(0, d) == base.tokens.at(0, d));
    CHECK(moved.tokens.at(3, d) == base.tokens.at(3, d));
    CHECK(moved.tokens.at(1, d) == base.tokens.at(2, d));
    CHECK(moved.tokens.at(2, d) == base.tokens.at(1, d));
  }
}

TEST_CASE("grid/pos-table mismatch is rejected, never interpolated") {
  T img = T::zeros({4, 4, 1});
  auto ps = xlv::patchify(img, 2);
  T proj = T::zeros({4, 6});
  CHECK_THROWS_AS(xlv::embed(ps, proj, T::zeros({9, 6})), std::invalid_argument);
  CHECK_THROWS_AS(xlv::embed(ps, proj, T::zeros({4, 5})), std::invalid_argument);
  CHECK_THROWS_AS(xlv::embed(ps, T::zeros({5, 6}), T::zeros({4, 6})),
                  std::invalid_argument);
}

TEST_CASE("gradients flow through patchify and embed") {
  xlv::Rng rng(36);
  T img = rand_image(rng, 4, 4, 1);
  img.set_requires_grad(true);
  T proj = xlv::reshape(rand_image(rng, 4, 3, 1), {4, 3});
  proj.set_requires_grad(true);
  T pos = xlv::reshape(rand_image(rng, 4, 3, 1), {4, 3});
  pos.set_requires_grad(true);

  auto build = [&]() -> T {
    auto tokens = xlv::embed(xlv::patchify(img, 2), proj, pos);
    return xlv::sum(xlv::mul(tokens.tokens, tokens.tokens));
  };
  fd::Mismatch m = fd::check({img, proj, pos}, build);
  INFO("at ", m.where, " analytic=", m.analytic, " numeric=", m.numeric);
  CHECK(m.ok);
}
