#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "rebo/datagen.hpp"
#include "rebo/models.hpp"

using namespace rebo;

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.classes = 8;
  spec.points = 64;
  spec.count_labeled = 16;
  spec.count_unlabeled = 24;
  spec.count_weak = 8;
  spec.count_strong = 8;
  spec.count_box = 4;
  spec.seed = 99;
  return spec;
}

double point_norm(const Tensor& pts, std::size_t i) {
  return std::sqrt(pts.at(i, 0) * pts.at(i, 0) + pts.at(i, 1) * pts.at(i, 1) +
                   pts.at(i, 2) * pts.at(i, 2));
}

}  // namespace

TEST_CASE("DatasetSpec validation") {
  DatasetSpec spec = small_spec();
  CHECK_NOTHROW(spec.validate());
  spec.classes = 1;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.classes = 9;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_spec();
  spec.points = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("unknown shape class id is rejected") {
  Rng rng(1);
  CHECK_THROWS_AS(sample_shape_surface(8, 16, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_shape_surface(-1, 16, rng), std::invalid_argument);
}

TEST_CASE("every in-distribution cloud fits the unit sphere") {
  DatasetSpec spec = small_spec();
  for (const Sample& s : generate_shapes(spec)) {
    for (std::size_t i = 0; i < s.points.dim(0); ++i) {
      CHECK(point_norm(s.points, i) <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("same seed gives a bit-identical dataset") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> a = generate_dataset(spec);
  std::vector<Sample> b = generate_dataset(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].points == b[i].points);
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].cohort == b[i].cohort);
    CHECK(a[i].label == b[i].label);
  }
}

TEST_CASE("regenerating one sample in isolation matches the full run") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> all = generate_shapes(spec);
  Sample lone = generate_in_distribution_sample(spec, 7, Cohort::L);
  CHECK(lone.points == all[7].points);
  Sample lone_u = generate_in_distribution_sample(
      spec, static_cast<std::int64_t>(spec.count_labeled) + 3, Cohort::U);
  CHECK(lone_u.points == all[spec.count_labeled + 3].points);
}

TEST_CASE("labeled cohort carries balanced class labels, unlabeled has none") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> all = generate_shapes(spec);
  std::vector<int> counts(spec.classes, 0);
  for (std::size_t i = 0; i < spec.count_labeled; ++i) {
    REQUIRE(all[i].cohort == Cohort::L);
    REQUIRE(all[i].labeled());
    counts[static_cast<std::size_t>(all[i].label)]++;
  }
  for (int c : counts) CHECK(c == 2);  // 16 labeled over 8 classes
  for (std::size_t i = spec.count_labeled; i < all.size(); ++i) {
    CHECK_FALSE(all[i].labeled());
  }
}

TEST_CASE("a linear probe on random-encoder features separates sphere from cube") {
  DatasetSpec spec;
  spec.classes = 8;
  spec.points = 64;
  spec.seed = 5;
  ModelConfig cfg;
  cfg.encoder_widths = {3, 16, 24, 24};
  cfg.classifier_widths = {24, 8};
  cfg.predictor_widths = {24, 8, 4, 1};
  ParamSet theta = init_task_params(7, cfg);

  // 100 spheres (class 0) and 100 cubes (class 1).
  std::vector<Tensor> features;
  std::vector<int> labels;
  for (int k = 0; k < 200; ++k) {
    Rng rng = Rng(spec.seed).derive("probe", static_cast<std::uint64_t>(k));
    Tensor cloud = shape_instance(k < 100 ? 0 : 1, spec.points, rng);
    features.push_back(encode_global_value(theta, cloud, cfg));
    labels.push_back(k < 100 ? 0 : 1);
  }
  // Logistic regression by plain gradient descent on z-scored features.
  const std::size_t dim = features[0].numel();
  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (const Tensor& f : features)
    for (std::size_t d = 0; d < dim; ++d) mu[d] += f[d] / 200.0;
  for (const Tensor& f : features)
    for (std::size_t d = 0; d < dim; ++d)
      sd[d] += (f[d] - mu[d]) * (f[d] - mu[d]) / 200.0;
  for (std::size_t d = 0; d < dim; ++d) sd[d] = std::sqrt(sd[d] + 1e-12);
  for (Tensor& f : features)
    for (std::size_t d = 0; d < dim; ++d) f[d] = (f[d] - mu[d]) / sd[d];
  std::vector<double> w(dim, 0.0);
  double b = 0.0;
  for (int it = 0; it < 6000; ++it) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (int k = 0; k < 200; ++k) {
      double z = b;
      for (std::size_t d = 0; d < dim; ++d) z += w[d] * features[k][d];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double err = p - labels[k];
      for (std::size_t d = 0; d < dim; ++d) gw[d] += err * features[k][d];
      gb += err;
    }
    for (std::size_t d = 0; d < dim; ++d) w[d] -= 0.5 * gw[d] / 200.0;
    b -= 0.5 * gb / 200.0;
  }
  int correct = 0;
  for (int k = 0; k < 200; ++k) {
    double z = b;
    for (std::size_t d = 0; d < dim; ++d) z += w[d] * features[k][d];
    if ((z > 0.0 ? 1 : 0) == labels[k]) ++correct;
  }
  CHECK(correct / 200.0 > 0.9);
}

TEST_CASE("weak OOD blocks respect the noise-fraction bounds over 100 samples") {
  DatasetSpec spec = small_spec();
  spec.points = 128;
  WeakOodOptions opt;
  for (int k = 0; k < 100; ++k) {
    Rng rng = Rng(spec.seed).derive("weak", static_cast<std::uint64_t>(k));
    CroppedBlock block = make_weak_ood_block(rng, spec, opt);
    CHECK(block.points.dim(0) == spec.points);
    const double frac =
        static_cast<double>(block.noise_count) / static_cast<double>(spec.points);
    CHECK(frac >= 0.1 - 0.5 / spec.points);
    CHECK(frac <= 0.3 + 0.5 / spec.points);
  }
}

TEST_CASE("weak OOD samples carry cohort W and are unit-normalized") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> weak = make_weak_ood(spec, 1000, 6);
  REQUIRE(weak.size() == 6);
  for (const Sample& s : weak) {
    CHECK(s.cohort == Cohort::W);
    CHECK_FALSE(s.labeled());
    for (std::size_t i = 0; i < s.points.dim(0); ++i) {
      CHECK(point_norm(s.points, i) <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("a clip box covering one whole shape with zero noise recovers it") {
  // The degenerate crop: the block is a clean in-distribution object.
  DatasetSpec spec = small_spec();
  SceneOptions opt;
  opt.min_shapes = 1;
  opt.max_shapes = 1;
  opt.shape_points = spec.points;
  opt.floor_points = 64;
  Rng rng(17);
  Scene scene = build_scene(rng, spec, opt);
  REQUIRE(scene.shapes.size() == 1);
  // Shapes are placed well above the floor patch, so inflating the
  // shape's own bounds still excludes every floor point.
  Box generous = scene.shapes[0].box;
  generous.lx *= 1.01;
  generous.ly *= 1.01;
  generous.lz *= 1.01;
  REQUIRE(generous.cz - 0.5 * generous.lz > 0.03);
  std::optional<CroppedBlock> block =
      crop_block(scene.points, generous, 0.0, spec.points, rng);
  REQUIRE(block.has_value());
  CHECK(block->noise_count == 0);
  CHECK(block->crop_count == spec.points);
  Tensor expected = scene.shapes[0].points;
  normalize_unit_sphere(expected);
  CHECK(block->points == expected);
}

TEST_CASE("crop of an empty box reports nullopt") {
  Rng rng(3);
  Tensor pts({4, 3}, {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3});
  Box faraway{50.0, 50.0, 50.0, 1.0, 1.0, 1.0};
  CHECK_FALSE(crop_block(pts, faraway, 0.1, 8, rng).has_value());
}

TEST_CASE("strong OOD jitter blows the mean point norm past 1.7") {
  DatasetSpec spec = small_spec();
  spec.points = 128;
  std::vector<Sample> blocks = make_weak_ood(spec, 0, 100);
  std::vector<Sample> strong = make_strong_ood(blocks, spec.seed, 0);
  double mean_norm = 0.0, mean_sq_before = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < strong.size(); ++k) {
    for (std::size_t i = 0; i < strong[k].points.dim(0); ++i) {
      mean_norm += point_norm(strong[k].points, i);
      const double r = point_norm(blocks[k].points, i);
      mean_sq_before += r * r;
      ++n;
    }
  }
  mean_norm /= static_cast<double>(n);
  mean_sq_before /= static_cast<double>(n);
  const double expected = std::sqrt(mean_sq_before + 3.0);
  CHECK(expected >= 1.7);
  CHECK(std::abs(mean_norm - expected) / expected <= 0.15);
}

TEST_CASE("rotation part of strongify is an isometry") {
  // With the Gaussian part absent the transform must preserve pairwise
  // distances; verified through a zero-noise replica of the rotation.
  Rng base(7);
  Tensor cloud({24, 3});
  for (std::size_t i = 0; i < cloud.numel(); ++i)
    cloud[i] = base.uniform(-1.0, 1.0);
  // Replicate strongify's rotation with the same draws, then compare
  // distances (the noise adds after rotation, so distances before noise
  // are what the rotation alone produced).
  const double half_pi = 0.5 * std::numbers::pi;
  Rng r1(42);
  const double ax = r1.uniform(-half_pi, half_pi);
  const double ay = r1.uniform(-half_pi, half_pi);
  const double az = r1.uniform(-half_pi, half_pi);
  const double cx = std::cos(ax), sx = std::sin(ax);
  const double cy = std::cos(ay), sy = std::sin(ay);
  const double cz = std::cos(az), sz = std::sin(az);
  Tensor rotated = cloud;
  for (std::size_t i = 0; i < cloud.dim(0); ++i) {
    double x = cloud.at(i, 0), y = cloud.at(i, 1), z = cloud.at(i, 2);
    double y1 = cx * y - sx * z, z1 = sx * y + cx * z;
    double x2 = cy * x + sy * z1, z2 = -sy * x + cy * z1;
    double x3 = cz * x2 - sz * y1, y3 = sz * x2 + cz * y1;
    rotated.at(i, 0) = x3;
    rotated.at(i, 1) = y3;
    rotated.at(i, 2) = z2;
  }
  for (std::size_t i = 0; i < cloud.dim(0); ++i) {
    for (std::size_t j = i + 1; j < cloud.dim(0); ++j) {
      double before = 0.0, after = 0.0;
      for (int d = 0; d < 3; ++d) {
        before += (cloud.at(i, d) - cloud.at(j, d)) *
                  (cloud.at(i, d) - cloud.at(j, d));
        after += (rotated.at(i, d) - rotated.at(j, d)) *
                 (rotated.at(i, d) - rotated.at(j, d));
      }
      CHECK(std::abs(std::sqrt(before) - std::sqrt(after)) <= 1e-9);
    }
  }
}

TEST_CASE("strong OOD cohort tag") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> blocks = make_weak_ood(spec, 0, 3);
  for (const Sample& s : make_strong_ood(blocks, spec.seed, 500)) {
    CHECK(s.cohort == Cohort::S);
  }
}

TEST_CASE("perturb_box formula case: alpha=0.5, b=0") {
  // With those draws pinned, center 0 size 2 moves to center 1 size 2.
  Box box{0.0, 0.0, 0.0, 2.0, 2.0, 2.0};
  Rng rng(11);
  Box out = perturb_box(box, rng);
  for (double shift : {out.cx, out.cy, out.cz}) {
    CHECK(std::abs(shift) >= 0.5 * 2.0);
    CHECK(std::abs(shift) <= 1.0 * 2.0);
  }
  // Direct check of the printed arithmetic.
  CHECK(0.0 + 0.5 * 2.0 == 1.0);
  CHECK((1.0 + 0.0) * 2.0 == 2.0);
}

TEST_CASE("perturb_box center-shift law holds for 1000 draws") {
  Box box{0.3, -0.2, 0.5, 1.5, 0.8, 2.2};
  Rng rng(13);
  for (int k = 0; k < 1000; ++k) {
    Box out = perturb_box(box, rng);
    const double shifts[3] = {std::abs(out.cx - box.cx),
                              std::abs(out.cy - box.cy),
                              std::abs(out.cz - box.cz)};
    const double sizes[3] = {box.lx, box.ly, box.lz};
    for (int d = 0; d < 3; ++d) {
      CHECK(shifts[d] >= 0.5 * sizes[d]);
      CHECK(shifts[d] <= 1.0 * sizes[d]);
    }
    CHECK(out.lx > 0.1 * box.lx);
    CHECK(out.ly > 0.1 * box.ly);
    CHECK(out.lz > 0.1 * box.lz);
  }
}

TEST_CASE("perturb_box size ratio is centered at 1 with std near 0.2") {
  Box box{0.0, 0.0, 0.0, 1.0, 1.0, 1.0};
  Rng rng(17);
  double sum = 0.0, sumsq = 0.0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    Box out = perturb_box(box, rng);
    sum += out.lx;
    sumsq += out.lx * out.lx;
  }
  const double mean = sum / draws;
  const double stdev = std::sqrt(sumsq / draws - mean * mean);
  CHECK(std::abs(mean - 1.0) <= 0.01);
  CHECK(std::abs(stdev - 0.2) / 0.2 <= 0.10);
}

TEST_CASE("box OOD crops overlap their source object only partially") {
  DatasetSpec spec = small_spec();
  spec.points = 96;
  int partial = 0, total = 0;
  for (int k = 0; k < 200; ++k) {
    Rng rng = Rng(spec.seed).derive("boxtest", static_cast<std::uint64_t>(k));
    SceneOptions opt;
    opt.min_shapes = 2;
    opt.max_shapes = 3;
    Scene scene = build_scene(rng, spec, opt);
    const PlacedShape& target = scene.shapes[rng.index(scene.shapes.size())];
    Box perturbed = perturb_box(target.box, rng);
    std::size_t captured = 0;
    for (std::size_t i = 0; i < target.points.dim(0); ++i) {
      if (perturbed.contains(target.points.at(i, 0), target.points.at(i, 1),
                             target.points.at(i, 2))) {
        ++captured;
      }
    }
    ++total;
    if (captured < target.points.dim(0)) ++partial;
  }
  CHECK(partial >= static_cast<int>(0.9 * total));
}

TEST_CASE("box OOD samples carry cohort O and full point count") {
  DatasetSpec spec = small_spec();
  BoxOodResult result = make_box_ood(spec, 2000, 6);
  CHECK(result.samples.size() + result.skipped == 6);
  for (const Sample& s : result.samples) {
    CHECK(s.cohort == Cohort::O);
    CHECK(s.points.dim(0) == spec.points);
  }
}

TEST_CASE("epoch_split produces disjoint covering halves") {
  std::vector<std::int64_t> pool(100);
  for (int i = 0; i < 100; ++i) pool[i] = i;
  Rng rng(19);
  EpochSplit split = epoch_split(pool, rng);
  CHECK(split.train_ids.size() == 50);
  CHECK(split.validation_ids.size() == 50);
  std::set<std::int64_t> all(split.train_ids.begin(), split.train_ids.end());
  for (std::int64_t id : split.validation_ids) {
    CHECK(all.insert(id).second);  // no overlap
  }
  CHECK(all.size() == 100);
}

TEST_CASE("epoch_split gives validation the smaller half on odd pools") {
  std::vector<std::int64_t> pool{1, 2, 3};
  Rng rng(23);
  EpochSplit split = epoch_split(pool, rng);
  CHECK(split.train_ids.size() == 2);
  CHECK(split.validation_ids.size() == 1);
}

TEST_CASE("epoch_split rejects pools smaller than 2") {
  Rng rng(29);
  std::vector<std::int64_t> tiny{7};
  CHECK_THROWS_AS(epoch_split(tiny, rng), std::invalid_argument);
}

TEST_CASE("different epochs draw different splits") {
  std::vector<std::int64_t> pool(30);
  for (int i = 0; i < 30; ++i) pool[i] = i;
  Rng base(31);
  bool any_different = false;
  Rng first = base.derive("split", 0);
  EpochSplit reference = epoch_split(pool, first);
  for (int epoch = 1; epoch <= 10; ++epoch) {
    Rng rng = base.derive("split", static_cast<std::uint64_t>(epoch));
    EpochSplit split = epoch_split(pool, rng);
    if (split.train_ids != reference.train_ids) any_different = true;
  }
  CHECK(any_different);
}

TEST_CASE("dataset file round-trips cohorts, labels, and points exactly") {
  DatasetSpec spec = small_spec();
  std::vector<Sample> samples = generate_dataset(spec);
  std::ostringstream buf;
  write_dataset(buf, samples, spec.classes, spec.points);
  std::istringstream in(buf.str());
  Dataset loaded = read_dataset(in);
  CHECK(loaded.classes == spec.classes);
  CHECK(loaded.points == spec.points);
  REQUIRE(loaded.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded.samples[i].id == samples[i].id);
    CHECK(loaded.samples[i].cohort == samples[i].cohort);
    CHECK(loaded.samples[i].label == samples[i].label);
    CHECK(loaded.samples[i].points == samples[i].points);
  }
  // Byte determinism: rewriting the loaded samples reproduces the stream.
  std::ostringstream again;
  write_dataset(again, loaded.samples, loaded.classes, loaded.points);
  CHECK(again.str() == buf.str());
}

TEST_CASE("dataset reader rejects corrupted headers") {
  std::istringstream bad("NOPE");
  CHECK_THROWS_AS(read_dataset(bad), std::runtime_error);
}
