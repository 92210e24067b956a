#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

#include <queue>

using namespace wsisam;
using testing::naive_pool;
using testing::random_image;

namespace {

// Independent 8-connected flood fill.
int count_components(const Mask& m) {
  std::vector<uint8_t> seen(m.data.size(), 0);
  int n = 0;
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      if (!m.at(r, c) || seen[static_cast<size_t>(r * m.cols + c)]) continue;
      ++n;
      std::queue<std::pair<int, int>> q;
      q.push({r, c});
      seen[static_cast<size_t>(r * m.cols + c)] = 1;
      while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= m.rows || xx >= m.cols) continue;
            const size_t k = static_cast<size_t>(yy * m.cols + xx);
            if (m.at(yy, xx) && !seen[k]) {
              seen[k] = 1;
              q.push({yy, xx});
            }
          }
      }
    }
  return n;
}

}  // namespace

TEST_CASE("constant image is invariant under pooling") {
  const auto pyr = build_pyramid(Image(4, 4, 1, 1.0), Mask(4, 4), 2);
  REQUIRE(pyr.n_levels() == 2);
  CHECK(pyr.levels[1] == Image(2, 2, 1, 1.0));
}

TEST_CASE("2x2 image pools to its mean") {
  Image img(2, 2);
  img.at(0, 1) = 4.0;
  const auto pyr = build_pyramid(img, Mask(2, 2), 2);
  CHECK(pyr.levels[1].at(0, 0) == 1.0);
}

TEST_CASE("level 2 of a 64x64 pyramid equals the nested-loop pooling oracle twice") {
  const Image img = random_image(64, 64, 42);
  const auto pyr = build_pyramid(img, Mask(64, 64), 3);
  const Image oracle = naive_pool(naive_pool(img));
  REQUIRE(pyr.levels[2].rows == 16);
  for (size_t i = 0; i < oracle.data.size(); ++i) CHECK(pyr.levels[2].data[i] == oracle.data[i]);
}

TEST_CASE("pooling preserves the image mean") {
  const Image img = random_image(32, 48, 3);
  const auto pyr = build_pyramid(img, Mask(32, 48), 4);
  auto mean = [](const Image& i) {
    double s = 0;
    for (double v : i.data) s += v;
    return s / static_cast<double>(i.data.size());
  };
  for (int k = 1; k < 4; ++k) CHECK(mean(pyr.levels[k]) == doctest::Approx(mean(img)).epsilon(1e-12));
}

TEST_CASE("GT levels are max-pooled") {
  Mask gt(4, 4);
  gt.at(1, 1) = 1;
  const auto pyr = build_pyramid(Image(4, 4), gt, 2);
  CHECK(pyr.gt_levels[1].at(0, 0) == 1);
  CHECK(pyr.gt_levels[1].count() == 1);
}

TEST_CASE("non-dyadic dimensions are rejected with a divisibility message") {
  try {
    build_pyramid(Image(5, 7), Mask(5, 7), 2);
    FAIL("expected an exception");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("divisible") != std::string::npos);
  }
  CHECK_THROWS_AS(build_pyramid(Image(4, 4), Mask(4, 4), 1), InvalidArgument);
  CHECK_THROWS_AS(build_pyramid(Image(4, 4), Mask(2, 2), 2), ShapeMismatch);
}

TEST_CASE("constant pyramid gives constant concentric patches") {
  const auto pyr = build_pyramid(Image(256, 256, 1, 7.0), Mask(256, 256), 2);
  const auto p = extract_pair(pyr, 128, 128, 0, 64);
  CHECK(p.hr_patch == Image(64, 64, 1, 7.0));
  CHECK(p.lr_patch == Image(64, 64, 1, 7.0));
  CHECK(avgpool2x2(p.hr_patch) == center_crop(p.lr_patch, 32));
}

TEST_CASE("pooled HR patch equals the central crop of the LR patch exactly") {
  const auto pyr = build_pyramid(random_image(256, 256, 11), Mask(256, 256), 2);
  const auto p = extract_pair(pyr, 128, 128, 0, 128);
  const Image pooled = naive_pool(p.hr_patch);
  const Image crop = center_crop(p.lr_patch, 64);
  REQUIRE(pooled.rows == 64);
  for (size_t i = 0; i < pooled.data.size(); ++i) CHECK(pooled.data[i] == crop.data[i]);
  CHECK(avgpool2x2(p.hr_patch) == crop);
}

TEST_CASE("concentricity holds at a coarser HR level") {
  const auto pyr = build_pyramid(random_image(256, 256, 12), Mask(256, 256), 3);
  const auto p = extract_pair(pyr, 128, 124, 1, 32);
  CHECK(avgpool2x2(p.hr_patch) == center_crop(p.lr_patch, 16));
  const Extent hr = p.hr_extent_world(), lr = p.lr_extent_world();
  CHECK(hr == Extent{96, 92, 160, 156});
  CHECK(lr == Extent{64, 60, 192, 188});
}

TEST_CASE("extraction errors") {
  const auto pyr = build_pyramid(random_image(256, 256, 13), Mask(256, 256), 2);
  CHECK_THROWS_AS(extract_pair(pyr, 10, 10, 0, 128), OutOfBounds);
  CHECK_THROWS_AS(extract_pair(pyr, 128, 128, 0, 30), InvalidArgument);
  CHECK_THROWS_AS(extract_pair(pyr, 127, 128, 0, 64), InvalidArgument);
  CHECK_THROWS_AS(extract_pair(pyr, 128, 128, 1, 64), OutOfBounds);
}

TEST_CASE("synthetic dataset without objects has an empty GT") {
  SynthConfig cfg;
  cfg.n_objects = 0;
  const auto data = synth_dataset(cfg);
  REQUIRE(data.size() == 1);
  for (const auto& m : data[0].gt_levels) CHECK(m.count() == 0);
}

TEST_CASE("synthetic dataset is a pure function of its config") {
  SynthConfig cfg;
  cfg.n_images = 3;
  cfg.n_objects = 1;
  cfg.seed = 99;
  const auto a = synth_dataset(cfg);
  const auto b = synth_dataset(cfg);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].levels == b[i].levels);
    CHECK(a[i].gt_levels == b[i].gt_levels);
    CHECK(a[i].id == b[i].id);
  }
  cfg.seed = 100;
  CHECK_FALSE(synth_dataset(cfg)[0].levels == a[0].levels);
}

TEST_CASE("every generated object is one connected component") {
  SynthConfig cfg;
  cfg.n_images = 10;
  cfg.seed = 7;
  const auto data = synth_dataset(cfg);
  REQUIRE(data.size() == 10);
  for (const auto& pyr : data) {
    CHECK(count_components(pyr.gt_levels[0]) == cfg.n_objects);
    CHECK(connected_components(pyr.gt_levels[0]).size() == static_cast<size_t>(cfg.n_objects));
    CHECK(pyr.objects.size() == static_cast<size_t>(cfg.n_objects));
  }
}

TEST_CASE("lesions are filled discs and ducts contribute only their wall") {
  SynthConfig cfg;
  cfg.n_images = 6;
  cfg.seed = 21;
  for (const auto& pyr : synth_dataset(cfg)) {
    for (const auto& o : pyr.objects) {
      const bool centre_fg = pyr.gt_levels[0].at(o.center_row, o.center_col) == 1;
      CHECK(centre_fg == (o.family == ObjectFamily::lesion));
    }
  }
}

TEST_CASE("sampled pairs are concentric and reproducible") {
  SynthConfig cfg;
  cfg.n_images = 4;
  cfg.seed = 5;
  const auto data = synth_dataset(cfg);
  SamplerConfig sc;
  const auto a = sample_pairs(data, sc, 3);
  const auto b = sample_pairs(data, sc, 3);
  REQUIRE(a.size() == 8);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].hr_patch == b[i].hr_patch);
    CHECK(avgpool2x2(a[i].hr_patch) == center_crop(a[i].lr_patch, 64));
  }
}

TEST_CASE("snap_center lands on the alignment grid") {
  const auto pyr = build_pyramid(Image(512, 512), Mask(512, 512), 3);
  int r = 3, c = 301;
  snap_center(pyr, 1, 64, r, c);
  CHECK(r % 4 == 0);
  CHECK(c % 4 == 0);
  CHECK_NOTHROW(extract_pair(pyr, r, c, 1, 64));
}
