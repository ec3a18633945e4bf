// Procedural synthetic point clouds with an open-set cohort structure:
// labeled / unlabeled in-distribution shapes, weak OOD scene-block crops,
// strong OOD (heavily rotated and jittered blocks), and perturbed-box
// crops. Everything is counter-keyed by (seed, sample id): regenerating
// one sample in isolation reproduces the full-run sample bit for bit.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rebo/models.hpp"  // io helpers
#include "rebo/rng.hpp"
#include "rebo/sample.hpp"
#include "rebo/tensor.hpp"

namespace rebo {

constexpr std::size_t kShapeFamilyCount = 8;

inline const char* shape_family_name(int class_id) {
  switch (class_id) {
    case 0: return "sphere";
    case 1: return "cube";
    case 2: return "cylinder";
    case 3: return "cone";
    case 4: return "torus";
    case 5: return "planes";
    case 6: return "helix";
    case 7: return "cross";
  }
  throw std::invalid_argument("shape_family_name: unknown class id " +
                              std::to_string(class_id));
}

struct DatasetSpec {
  std::size_t classes = 8;
  std::size_t points = 256;
  std::size_t count_labeled = 40;
  std::size_t count_unlabeled = 400;
  std::size_t count_weak = 200;
  std::size_t count_strong = 200;
  std::size_t count_box = 0;
  std::uint64_t seed = 1;

  void validate() const {
    if (classes < 2 || classes > kShapeFamilyCount) {
      throw std::invalid_argument("DatasetSpec: classes must be in [2," +
                                  std::to_string(kShapeFamilyCount) + "]");
    }
    if (points == 0) {
      throw std::invalid_argument("DatasetSpec: points must be positive");
    }
  }

  std::size_t total() const {
    return count_labeled + count_unlabeled + count_weak + count_strong +
           count_box;
  }
};

struct Box {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double lx = 1.0, ly = 1.0, lz = 1.0;

  void validate() const {
    if (lx <= 0.0 || ly <= 0.0 || lz <= 0.0) {
      throw std::invalid_argument("Box: sizes must be positive");
    }
  }

  bool contains(double x, double y, double z) const {
    return std::abs(x - cx) <= 0.5 * lx && std::abs(y - cy) <= 0.5 * ly &&
           std::abs(z - cz) <= 0.5 * lz;
  }
};

namespace detail {

inline void unit_direction(Rng& rng, double& x, double& y, double& z) {
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
  } while (x * x + y * y + z * z < 1e-12);
  const double n = std::sqrt(x * x + y * y + z * z);
  x /= n;
  y /= n;
  z /= n;
}

// Uniform point on an axis-aligned box surface, faces weighted by area.
inline void box_surface_point(Rng& rng, double lx, double ly, double lz,
                              double& x, double& y, double& z) {
  const double axy = lx * ly, ayz = ly * lz, axz = lx * lz;
  const double total = 2.0 * (axy + ayz + axz);
  double pick = rng.uniform(0.0, total);
  x = rng.uniform(-0.5 * lx, 0.5 * lx);
  y = rng.uniform(-0.5 * ly, 0.5 * ly);
  z = rng.uniform(-0.5 * lz, 0.5 * lz);
  if (pick < 2.0 * axy) {
    z = pick < axy ? -0.5 * lz : 0.5 * lz;
  } else if (pick < 2.0 * axy + 2.0 * ayz) {
    x = pick < 2.0 * axy + ayz ? -0.5 * lx : 0.5 * lx;
  } else {
    y = pick < 2.0 * axy + 2.0 * ayz + axz ? -0.5 * ly : 0.5 * ly;
  }
}

}  // namespace detail

// Surface-uniform sample of one base shape family centered at the origin,
// before any instance jitter or normalization.
inline Tensor sample_shape_surface(int class_id, std::size_t n, Rng& rng) {
  Tensor pts({n, 3});
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0, y = 0.0, z = 0.0;
    switch (class_id) {
      case 0: {  // sphere, radius 0.8
        detail::unit_direction(rng, x, y, z);
        x *= 0.8;
        y *= 0.8;
        z *= 0.8;
        break;
      }
      case 1: {  // cube surface, side 1.2
        detail::box_surface_point(rng, 1.2, 1.2, 1.2, x, y, z);
        break;
      }
      case 2: {  // cylinder r=0.45 h=1.2, lateral + caps by area
        const double r = 0.45, h = 1.2;
        const double lateral = 2.0 * pi * r * h, caps = 2.0 * pi * r * r;
        if (rng.uniform(0.0, lateral + caps) < lateral) {
          const double a = rng.uniform(0.0, 2.0 * pi);
          x = r * std::cos(a);
          y = r * std::sin(a);
          z = rng.uniform(-0.5 * h, 0.5 * h);
        } else {
          const double a = rng.uniform(0.0, 2.0 * pi);
          const double rr = r * std::sqrt(rng.uniform());
          x = rr * std::cos(a);
          y = rr * std::sin(a);
          z = rng.uniform() < 0.5 ? -0.5 * h : 0.5 * h;
        }
        break;
      }
      case 3: {  // cone base r=0.6 h=1.2, apex up
        const double r = 0.6, h = 1.2;
        const double slant = std::sqrt(r * r + h * h);
        const double lateral = pi * r * slant, base = pi * r * r;
        if (rng.uniform(0.0, lateral + base) < lateral) {
          const double f = std::sqrt(rng.uniform());  // fraction from apex
          const double a = rng.uniform(0.0, 2.0 * pi);
          x = f * r * std::cos(a);
          y = f * r * std::sin(a);
          z = 0.5 * h - f * h;
        } else {
          const double a = rng.uniform(0.0, 2.0 * pi);
          const double rr = r * std::sqrt(rng.uniform());
          x = rr * std::cos(a);
          y = rr * std::sin(a);
          z = -0.5 * h;
        }
        break;
      }
      case 4: {  // torus R=0.55 r=0.25, area-correct via rejection
        const double R = 0.55, r = 0.25;
        double v = 0.0;
        do {
          v = rng.uniform(0.0, 2.0 * pi);
        } while (rng.uniform() >= (R + r * std::cos(v)) / (R + r));
        const double u = rng.uniform(0.0, 2.0 * pi);
        x = (R + r * std::cos(v)) * std::cos(u);
        y = (R + r * std::cos(v)) * std::sin(u);
        z = r * std::sin(v);
        break;
      }
      case 5: {  // two parallel square planes, side 1.2, z = +-0.35
        x = rng.uniform(-0.6, 0.6);
        y = rng.uniform(-0.6, 0.6);
        z = rng.uniform() < 0.5 ? -0.35 : 0.35;
        break;
      }
      case 6: {  // helix: 2.5 turns, radius 0.6, height 1.2, tube 0.08
        const double t = rng.uniform();
        const double a = 2.0 * pi * 2.5 * t;
        x = 0.6 * std::cos(a);
        y = 0.6 * std::sin(a);
        z = -0.6 + 1.2 * t;
        double ox, oy, oz;
        detail::unit_direction(rng, ox, oy, oz);
        const double rr = 0.08 * std::cbrt(rng.uniform());
        x += rr * ox;
        y += rr * oy;
        z += rr * oz;
        break;
      }
      case 7: {  // cross of two orthogonal slabs
        const bool first = rng.uniform() < 0.5;
        detail::box_surface_point(rng, first ? 1.4 : 0.3, first ? 0.3 : 1.4,
                                  0.3, x, y, z);
        break;
      }
      default:
        throw std::invalid_argument("sample_shape_surface: unknown class id " +
                                    std::to_string(class_id));
    }
    pts.at(i, 0) = x;
    pts.at(i, 1) = y;
    pts.at(i, 2) = z;
  }
  return pts;
}

// Center on the centroid and scale so the farthest point sits on the unit
// sphere.
inline void normalize_unit_sphere(Tensor& pts) {
  const std::size_t n = pts.dim(0);
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cx += pts.at(i, 0);
    cy += pts.at(i, 1);
    cz += pts.at(i, 2);
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  cz /= static_cast<double>(n);
  double max_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pts.at(i, 0) -= cx;
    pts.at(i, 1) -= cy;
    pts.at(i, 2) -= cz;
    const double r = std::sqrt(pts.at(i, 0) * pts.at(i, 0) +
                               pts.at(i, 1) * pts.at(i, 1) +
                               pts.at(i, 2) * pts.at(i, 2));
    max_norm = std::max(max_norm, r);
  }
  if (max_norm > 0.0) {
    for (std::size_t i = 0; i < n * 3; ++i) pts[i] /= max_norm;
  }
}

// One in-distribution instance: per-axis scale jitter, a random rotation
// about the vertical axis, then unit-sphere normalization.
inline Tensor shape_instance(int class_id, std::size_t n, Rng& rng) {
  Tensor pts = sample_shape_surface(class_id, n, rng);
  const double sx = rng.uniform(0.8, 1.2);
  const double sy = rng.uniform(0.8, 1.2);
  const double sz = rng.uniform(0.8, 1.2);
  const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double c = std::cos(a), s = std::sin(a);
  for (std::size_t i = 0; i < n; ++i) {
    double x = pts.at(i, 0) * sx;
    double y = pts.at(i, 1) * sy;
    double z = pts.at(i, 2) * sz;
    pts.at(i, 0) = c * x - s * y;
    pts.at(i, 1) = s * x + c * y;
    pts.at(i, 2) = z;
  }
  normalize_unit_sphere(pts);
  return pts;
}

// ---- in-distribution cohorts ----

// Sample k is reproducible from (spec.seed, id) alone; classes rotate
// round-robin so small labeled pools stay balanced.
inline Sample generate_in_distribution_sample(const DatasetSpec& spec,
                                              std::int64_t id,
                                              Cohort cohort) {
  spec.validate();
  Rng rng = Rng(spec.seed).derive("shape", static_cast<std::uint64_t>(id));
  const int class_id = static_cast<int>(id % static_cast<std::int64_t>(
                                                 spec.classes));
  Sample s;
  s.id = id;
  s.points = shape_instance(class_id, spec.points, rng);
  s.label = cohort == Cohort::L ? class_id : kNoLabel;
  s.cohort = cohort;
  return s;
}

inline std::vector<Sample> generate_shapes(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(spec.count_labeled + spec.count_unlabeled);
  std::int64_t id = 0;
  for (std::size_t i = 0; i < spec.count_labeled; ++i, ++id) {
    out.push_back(generate_in_distribution_sample(spec, id, Cohort::L));
  }
  for (std::size_t i = 0; i < spec.count_unlabeled; ++i, ++id) {
    out.push_back(generate_in_distribution_sample(spec, id, Cohort::U));
  }
  return out;
}

// ---- scenes and block crops (weak OOD, box OOD) ----

struct PlacedShape {
  int class_id = 0;
  Tensor points;  // scene coordinates
  Box box;        // axis-aligned bounds
};

struct Scene {
  std::vector<PlacedShape> shapes;
  Tensor points;  // all scene points: shapes first, then floor
};

struct SceneOptions {
  int min_shapes = 1;
  int max_shapes = 2;
  std::size_t shape_points = 256;
  std::size_t floor_points = 192;
  double shape_scale = 0.5;
  double floor_half = 1.2;
};

inline Scene build_scene(Rng& rng, const DatasetSpec& spec,
                         const SceneOptions& opt) {
  Scene scene;
  const int n_shapes = opt.min_shapes +
                       static_cast<int>(rng.index(static_cast<std::size_t>(
                           opt.max_shapes - opt.min_shapes + 1)));
  std::size_t total = opt.floor_points +
                      static_cast<std::size_t>(n_shapes) * opt.shape_points;
  scene.points = Tensor({total, 3});
  std::size_t row = 0;
  for (int k = 0; k < n_shapes; ++k) {
    const int class_id =
        static_cast<int>(rng.index(spec.classes));
    Tensor pts = sample_shape_surface(class_id, opt.shape_points, rng);
    const double scale = opt.shape_scale * rng.uniform(0.8, 1.2);
    const double ox = rng.uniform(-0.7, 0.7);
    const double oy = rng.uniform(-0.7, 0.7);
    const double oz = rng.uniform(0.45, 0.75);
    double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
    for (std::size_t i = 0; i < opt.shape_points; ++i) {
      double p[3] = {pts.at(i, 0) * scale + ox, pts.at(i, 1) * scale + oy,
                     pts.at(i, 2) * scale + oz};
      for (int d = 0; d < 3; ++d) {
        pts.at(i, d) = p[d];
        lo[d] = std::min(lo[d], p[d]);
        hi[d] = std::max(hi[d], p[d]);
      }
    }
    PlacedShape placed;
    placed.class_id = class_id;
    placed.points = pts;
    placed.box = Box{0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]),
                     0.5 * (lo[2] + hi[2]), std::max(hi[0] - lo[0], 1e-6),
                     std::max(hi[1] - lo[1], 1e-6),
                     std::max(hi[2] - lo[2], 1e-6)};
    for (std::size_t i = 0; i < opt.shape_points; ++i) {
      for (int d = 0; d < 3; ++d) scene.points.at(row, d) = pts.at(i, d);
      ++row;
    }
    scene.shapes.push_back(std::move(placed));
  }
  for (std::size_t i = 0; i < opt.floor_points; ++i) {
    scene.points.at(row, 0) = rng.uniform(-opt.floor_half, opt.floor_half);
    scene.points.at(row, 1) = rng.uniform(-opt.floor_half, opt.floor_half);
    scene.points.at(row, 2) = rng.uniform(0.0, 0.02);
    ++row;
  }
  return scene;
}

struct CroppedBlock {
  Tensor points;            // [N,3], normalized after cropping
  std::size_t noise_count = 0;
  std::size_t crop_count = 0;  // scene points inside the box before padding
};

// Crop the scene to the box, resample to exactly n points, append uniform
// background noise inside the box, then normalize. The scene is cropped
// raw: normalization happens only after the crop, the way scene blocks
// are cut out of scans.
inline std::optional<CroppedBlock> crop_block(const Tensor& scene_points,
                                              const Box& box,
                                              double noise_fraction,
                                              std::size_t n, Rng& rng) {
  box.validate();
  std::vector<std::size_t> inside;
  for (std::size_t i = 0; i < scene_points.dim(0); ++i) {
    if (box.contains(scene_points.at(i, 0), scene_points.at(i, 1),
                     scene_points.at(i, 2))) {
      inside.push_back(i);
    }
  }
  if (inside.empty()) return std::nullopt;
  CroppedBlock out;
  out.crop_count = inside.size();
  out.noise_count = static_cast<std::size_t>(
      std::llround(noise_fraction * static_cast<double>(n)));
  const std::size_t keep = n - out.noise_count;
  out.points = Tensor({n, 3});
  std::vector<std::size_t> chosen;
  if (inside.size() == keep) {
    chosen = inside;  // identity crop keeps scene order
  } else if (inside.size() > keep) {
    rng.shuffle(inside);
    chosen.assign(inside.begin(), inside.begin() + static_cast<long>(keep));
  } else {
    chosen = inside;
    while (chosen.size() < keep) {
      chosen.push_back(inside[rng.index(inside.size())]);
    }
  }
  for (std::size_t i = 0; i < keep; ++i) {
    for (int d = 0; d < 3; ++d)
      out.points.at(i, d) = scene_points.at(chosen[i], d);
  }
  for (std::size_t i = keep; i < n; ++i) {
    out.points.at(i, 0) = rng.uniform(box.cx - 0.5 * box.lx, box.cx + 0.5 * box.lx);
    out.points.at(i, 1) = rng.uniform(box.cy - 0.5 * box.ly, box.cy + 0.5 * box.ly);
    out.points.at(i, 2) = rng.uniform(box.cz - 0.5 * box.lz, box.cz + 0.5 * box.lz);
  }
  normalize_unit_sphere(out.points);
  return out;
}

struct WeakOodOptions {
  SceneOptions scene;
  double noise_lo = 0.1;
  double noise_hi = 0.3;
};

// One weak-OOD block: a clip box centered near one of the placed shapes,
// cropping part of the scene (possibly a whole clean object), plus floor
// and background noise.
inline CroppedBlock make_weak_ood_block(Rng& rng, const DatasetSpec& spec,
                                        const WeakOodOptions& opt) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    Rng srng = rng.derive("scene", static_cast<std::uint64_t>(attempt));
    Scene scene = build_scene(srng, spec, opt.scene);
    const PlacedShape& anchor =
        scene.shapes[srng.index(scene.shapes.size())];
    // Clip boxes sit off-center and undersized: blocks usually capture a
    // part of an object plus floor and clutter, occasionally a whole one.
    Box clip;
    clip.cx = anchor.box.cx + srng.uniform(-0.45, 0.45) * anchor.box.lx;
    clip.cy = anchor.box.cy + srng.uniform(-0.45, 0.45) * anchor.box.ly;
    clip.cz = anchor.box.cz + srng.uniform(-0.35, 0.35) * anchor.box.lz;
    clip.lx = anchor.box.lx * srng.uniform(0.4, 1.1);
    clip.ly = anchor.box.ly * srng.uniform(0.4, 1.1);
    clip.lz = anchor.box.lz * srng.uniform(0.5, 1.4);
    clip.cz = std::max(clip.cz, 0.5 * clip.lz - 0.02);  // may reach the floor
    const double noise = srng.uniform(opt.noise_lo, opt.noise_hi);
    std::optional<CroppedBlock> block =
        crop_block(scene.points, clip, noise, spec.points, srng);
    if (block.has_value()) return *block;
  }
  throw std::runtime_error("make_weak_ood_block: empty crop after 16 scenes");
}

inline std::vector<Sample> make_weak_ood(const DatasetSpec& spec,
                                         std::int64_t first_id,
                                         std::size_t count,
                                         const WeakOodOptions& opt = {}) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::int64_t id = first_id + static_cast<std::int64_t>(k);
    Rng rng = Rng(spec.seed).derive("weak", static_cast<std::uint64_t>(id));
    Sample s;
    s.id = id;
    s.points = make_weak_ood_block(rng, spec, opt).points;
    s.label = kNoLabel;
    s.cohort = Cohort::W;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- strong OOD ----

// Random rotation with per-axis angles uniform in [-pi/2, pi/2] plus unit
// variance Gaussian jitter per coordinate. The jitter dominates the
// unit-sphere signal, which is the point: the manifold itself is gone.
inline Tensor strongify(const Tensor& block, Rng& rng) {
  const double half_pi = 0.5 * std::numbers::pi;
  const double ax = rng.uniform(-half_pi, half_pi);
  const double ay = rng.uniform(-half_pi, half_pi);
  const double az = rng.uniform(-half_pi, half_pi);
  const double cx = std::cos(ax), sx = std::sin(ax);
  const double cy = std::cos(ay), sy = std::sin(ay);
  const double cz = std::cos(az), sz = std::sin(az);
  Tensor out = block;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    double x = out.at(i, 0), y = out.at(i, 1), z = out.at(i, 2);
    // Rz * Ry * Rx
    double y1 = cx * y - sx * z, z1 = sx * y + cx * z;
    double x2 = cy * x + sy * z1, z2 = -sy * x + cy * z1;
    double x3 = cz * x2 - sz * y1, y3 = sz * x2 + cz * y1;
    out.at(i, 0) = x3 + rng.normal();
    out.at(i, 1) = y3 + rng.normal();
    out.at(i, 2) = z2 + rng.normal();
  }
  return out;
}

inline std::vector<Sample> make_strong_ood(const std::vector<Sample>& blocks,
                                           std::uint64_t seed,
                                           std::int64_t first_id) {
  std::vector<Sample> out;
  out.reserve(blocks.size());
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    Rng rng = Rng(seed).derive("strong",
                               static_cast<std::uint64_t>(first_id) + k);
    Sample s;
    s.id = first_id + static_cast<std::int64_t>(k);
    s.points = strongify(blocks[k].points, rng);
    s.label = kNoLabel;
    s.cohort = Cohort::S;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- perturbed-box OOD ----

// Per axis: center shifts by alpha * size with |alpha| uniform in
// [0.5, 1.0] and random sign; size scales by (1+b), b zero-mean Gaussian
// with std 0.2 redrawn until 1+b > 0.1.
inline Box perturb_box(const Box& box, Rng& rng) {
  box.validate();
  Box out = box;
  double* centers[3] = {&out.cx, &out.cy, &out.cz};
  double* sizes[3] = {&out.lx, &out.ly, &out.lz};
  const double base[3] = {box.lx, box.ly, box.lz};
  for (int d = 0; d < 3; ++d) {
    const double mag = rng.uniform(0.5, 1.0);
    const double alpha = rng.uniform() < 0.5 ? -mag : mag;
    *centers[d] += alpha * base[d];
  }
  for (int d = 0; d < 3; ++d) {
    double factor = 0.0;
    do {
      factor = 1.0 + rng.normal(0.0, 0.2);
    } while (factor <= 0.1);
    *sizes[d] = base[d] * factor;
  }
  return out;
}

struct BoxOodResult {
  std::vector<Sample> samples;
  std::size_t skipped = 0;  // empty after the retry budget
};

inline BoxOodResult make_box_ood(const DatasetSpec& spec,
                                 std::int64_t first_id, std::size_t count,
                                 const SceneOptions& scene_opt = {}) {
  spec.validate();
  BoxOodResult out;
  out.samples.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::int64_t id = first_id + static_cast<std::int64_t>(k);
    Rng rng = Rng(spec.seed).derive("box", static_cast<std::uint64_t>(id));
    SceneOptions opt = scene_opt;
    opt.min_shapes = std::max(opt.min_shapes, 2);
    opt.max_shapes = std::max(opt.max_shapes, 3);
    Scene scene = build_scene(rng, spec, opt);
    const PlacedShape& target = scene.shapes[rng.index(scene.shapes.size())];
    std::optional<CroppedBlock> block;
    for (int attempt = 0; attempt < 10 && !block.has_value(); ++attempt) {
      Box perturbed = perturb_box(target.box, rng);
      block = crop_block(scene.points, perturbed, 0.0, spec.points, rng);
    }
    if (!block.has_value()) {
      std::cerr << "make_box_ood: sample " << id
                << " skipped, perturbed box stayed empty after 10 tries\n";
      ++out.skipped;
      continue;
    }
    Sample s;
    s.id = id;
    s.points = block->points;
    s.label = kNoLabel;
    s.cohort = Cohort::O;
    out.samples.push_back(std::move(s));
  }
  return out;
}

// ---- full dataset assembly ----

namespace detail {

// Deterministic parallel map over [0, count): every slot is written by
// exactly one thread and the work per index is a pure function of the
// index, so the thread count never changes the output.
template <typename Fn>
inline void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const unsigned workers = std::min<unsigned>(threads, 16);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([w, workers, count, &fn] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

inline std::vector<Sample> generate_dataset(const DatasetSpec& spec,
                                            unsigned threads = 1) {
  spec.validate();
  std::vector<Sample> out(spec.total());
  const std::size_t n_l = spec.count_labeled;
  const std::size_t n_u = spec.count_unlabeled;
  const std::size_t n_w = spec.count_weak;
  const std::size_t n_s = spec.count_strong;
  detail::parallel_for(n_l + n_u + n_w + n_s, threads, [&](std::size_t k) {
    const std::int64_t id = static_cast<std::int64_t>(k);
    if (k < n_l) {
      out[k] = generate_in_distribution_sample(spec, id, Cohort::L);
    } else if (k < n_l + n_u) {
      out[k] = generate_in_distribution_sample(spec, id, Cohort::U);
    } else if (k < n_l + n_u + n_w) {
      out[k] = make_weak_ood(spec, id, 1).front();
    } else {
      // Strong OOD: a fresh weak-style block of its own, then corrupted.
      std::vector<Sample> seed_block = make_weak_ood(spec, id, 1);
      out[k] = make_strong_ood(seed_block, spec.seed, id).front();
    }
  });
  if (spec.count_box > 0) {
    const std::int64_t first =
        static_cast<std::int64_t>(n_l + n_u + n_w + n_s);
    BoxOodResult box = make_box_ood(spec, first, spec.count_box);
    out.resize(n_l + n_u + n_w + n_s);
    for (auto& s : box.samples) out.push_back(std::move(s));
  }
  return out;
}

// ---- per-epoch labeled/validation split ----

struct EpochSplit {
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> validation_ids;
};

// Disjoint halves redrawn per epoch; odd pools give validation the
// smaller half. Together the halves always cover the whole pool.
inline EpochSplit epoch_split(const std::vector<std::int64_t>& pool,
                              Rng& rng) {
  if (pool.size() < 2) {
    throw std::invalid_argument("epoch_split: pool must hold at least 2 ids");
  }
  std::vector<std::int64_t> ids = pool;
  rng.shuffle(ids);
  const std::size_t train_count = (ids.size() + 1) / 2;
  EpochSplit split;
  split.train_ids.assign(ids.begin(), ids.begin() + static_cast<long>(train_count));
  split.validation_ids.assign(ids.begin() + static_cast<long>(train_count),
                              ids.end());
  return split;
}

// ---- dataset file: header + fixed-size records, little-endian f64 ----
//
// Layout: magic "RBDS", u32 version, u32 classes, u32 points-per-cloud,
// u64 counts for cohorts L,U,W,S,O, then per sample (sorted by id):
// u64 id, u8 cohort, i32 label (-1 when absent), points f64 * N * 3.

inline void write_dataset(std::ostream& os, const std::vector<Sample>& samples,
                          std::size_t classes, std::size_t points) {
  std::size_t counts[5] = {0, 0, 0, 0, 0};
  for (const Sample& s : samples) {
    if (s.points.dim(0) != points) {
      throw std::invalid_argument("write_dataset: sample " +
                                  std::to_string(s.id) + " has " +
                                  std::to_string(s.points.dim(0)) +
                                  " points, expected " + std::to_string(points));
    }
    counts[static_cast<int>(s.cohort)]++;
  }
  os.write("RBDS", 4);
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(classes));
  io::write_u32(os, static_cast<std::uint32_t>(points));
  for (std::size_t c : counts) io::write_u64(os, c);
  for (const Sample& s : samples) {
    io::write_u64(os, static_cast<std::uint64_t>(s.id));
    const unsigned char cohort = static_cast<unsigned char>(s.cohort);
    os.write(reinterpret_cast<const char*>(&cohort), 1);
    io::write_u32(os, static_cast<std::uint32_t>(s.label));
    for (double v : s.points.vec()) io::write_f64(os, v);
  }
}

struct Dataset {
  std::size_t classes = 0;
  std::size_t points = 0;
  std::vector<Sample> samples;

  std::vector<std::int64_t> ids_of(Cohort c) const {
    std::vector<std::int64_t> out;
    for (const Sample& s : samples)
      if (s.cohort == c) out.push_back(s.id);
    return out;
  }

  const Sample& by_id(std::int64_t id) const {
    for (const Sample& s : samples)
      if (s.id == id) return s;
    throw std::out_of_range("Dataset: unknown sample id " +
                            std::to_string(id));
  }
};

inline Dataset read_dataset(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "RBDS") {
    throw std::runtime_error("read_dataset: bad magic");
  }
  const std::uint32_t version = io::read_u32(is);
  if (version != 1) {
    throw std::runtime_error("read_dataset: unsupported version " +
                             std::to_string(version));
  }
  Dataset out;
  out.classes = io::read_u32(is);
  out.points = io::read_u32(is);
  std::size_t counts[5];
  std::size_t total = 0;
  for (std::size_t& c : counts) {
    c = io::read_u64(is);
    total += c;
  }
  out.samples.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    Sample s;
    s.id = static_cast<std::int64_t>(io::read_u64(is));
    unsigned char cohort;
    is.read(reinterpret_cast<char*>(&cohort), 1);
    if (cohort > 4) throw std::runtime_error("read_dataset: bad cohort byte");
    s.cohort = static_cast<Cohort>(cohort);
    s.label = static_cast<int>(io::read_u32(is));
    std::vector<double> data(out.points * 3);
    for (double& v : data) v = io::read_f64(is);
    s.points = Tensor::checked({out.points, 3}, std::move(data));
    out.samples.push_back(std::move(s));
  }
  std::size_t recount[5] = {0, 0, 0, 0, 0};
  for (const Sample& s : out.samples) recount[static_cast<int>(s.cohort)]++;
  for (int c = 0; c < 5; ++c) {
    if (recount[c] != counts[c]) {
      throw std::runtime_error("read_dataset: cohort counts disagree with header");
    }
  }
  return out;
}

inline void write_dataset(const std::string& path,
                          const std::vector<Sample>& samples,
                          std::size_t classes, std::size_t points) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_dataset: cannot open " + path);
  write_dataset(os, samples, classes, points);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_dataset: cannot open " + path);
  return read_dataset(is);
}

}  // namespace rebo
