#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "raypatch/data_synth.hpp"

using namespace raypatch;
using namespace raypatch::data;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Plain quadratic with a = d.d; no shortcut for unit directions.
double oracle_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c, double r) {
  const double a = d.dot(d), b = 2.0 * d.dot(o - c), cc = (o - c).dot(o - c) - r * r;
  const double disc = b * b - 4.0 * a * cc;
  if (disc < 0.0) return kInf;
  const double t0 = (-b - std::sqrt(disc)) / (2.0 * a), t1 = (-b + std::sqrt(disc)) / (2.0 * a);
  if (t0 > 0.0) return t0;
  return t1 > 0.0 ? t1 : kInf;
}

// Six face planes, each checked against its face rectangle.
double oracle_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c, const Eigen::Vector3d& h) {
  double best = kInf;
  for (int a = 0; a < 3; ++a)
    for (double s : {-1.0, 1.0}) {
      if (d[a] == 0.0) continue;
      const double t = (c[a] + s * h[a] - o[a]) / d[a];
      if (t <= 0.0) continue;
      const Eigen::Vector3d p = o + t * d;
      bool inside = true;
      for (int b = 0; b < 3; ++b)
        if (b != a) inside = inside && std::abs(p[b] - c[b]) <= h[b] + 1e-12;
      if (inside) best = std::min(best, t);
    }
  return best;
}

double oracle_depth(const SceneSpec& spec, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  double best = kInf;
  for (const auto& obj : spec.objects) {
    best = std::min(best, obj.kind == ShapeKind::sphere ? oracle_sphere(o, d, obj.center, obj.radius)
                                                        : oracle_box(o, d, obj.center, obj.half_extent));
  }
  if (d.z() < 0.0) {
    const double t = -o.z() / d.z();
    if ((o + t * d).head<2>().norm() <= spec.floor_radius) best = std::min(best, t);
  }
  return best;
}

Eigen::Vector3d pixel_ray(const ViewSample& v, std::size_t i, std::size_t j) {
  return unproject({static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5, 1.0}, v.K, v.pose);
}

bool bit_equal_dataset(const Dataset& a, const Dataset& b) {
  if (a.scenes.size() != b.scenes.size()) return false;
  for (std::size_t s = 0; s < a.scenes.size(); ++s)
    for (std::size_t i = 0; i < kViewsPerScene; ++i) {
      const ViewSample &x = a.scenes[s].views[i], &y = b.scenes[s].views[i];
      if (!oracle::bit_equal(x.image, y.image) || !oracle::bit_equal(x.depth, y.depth)) return false;
      if (x.mask != y.mask || x.role != y.role) return false;
      if (x.pose.rotation != y.pose.rotation || x.pose.origin != y.pose.origin) return false;
      if (x.K.fx != y.K.fx || x.K.fy != y.K.fy || x.K.cx != y.K.cx || x.K.cy != y.K.cy) return false;
    }
  return true;
}

}  // namespace

TEST(Generator, SameSeedSameScene) {
  for (std::uint64_t seed : {0ull, 7ull, 123456789ull}) {
    const SceneSpec a = generate_scene(seed), b = generate_scene(seed);
    ASSERT_EQ(a.objects.size(), b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
      EXPECT_EQ(a.objects[i].center, b.objects[i].center);
      EXPECT_EQ(a.objects[i].color, b.objects[i].color);
    }
    EXPECT_EQ(a.light, b.light);
  }
}

TEST(Generator, ObjectCountsCoverTwoToFour) {
  std::set<std::size_t> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const std::size_t n = generate_scene(s).objects.size();
    EXPECT_GE(n, 2u);
    EXPECT_LE(n, 4u);
    seen.insert(n);
  }
  EXPECT_EQ(seen, (std::set<std::size_t>{2, 3, 4}));
}

TEST(Generator, ObjectsInsideUnitRegionAndDisjoint) {
  const RigConfig rig;
  for (std::uint64_t s = 0; s < 300; ++s) {
    const SceneSpec spec = generate_scene(s);
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
      const auto& a = spec.objects[i];
      EXPECT_LE(a.center.norm() + a.bounding_radius(), 1.0 + 1e-12);
      const double bottom = a.center.z() - (a.kind == ShapeKind::sphere ? a.radius : a.half_extent.z());
      EXPECT_NEAR(bottom, 0.0, 1e-12);  // resting on the floor
      for (std::size_t j = i + 1; j < spec.objects.size(); ++j) {
        const auto& b = spec.objects[j];
        EXPECT_GE((a.center - b.center).norm(), a.bounding_radius() + b.bounding_radius() - 1e-12);
      }
    }
    // cameras sit well outside every object
    for (double ang : kViewAngles) {
      const Eigen::Vector3d eye = rig_pose(ang, rig).origin;
      EXPECT_GT(eye.norm(), 1.0);
    }
  }
}

TEST(Render, EmptySceneIsBackground) {
  SceneSpec spec;
  const ViewSample v = render_view(spec, 0.0, 16, 12);
  const std::size_t n = 16 * 12;
  for (std::size_t p = 0; p < n; ++p) {
    EXPECT_EQ(v.mask[p], 0);
    EXPECT_TRUE(std::isinf(v.depth.data()[p]));
    for (int c = 0; c < 3; ++c) EXPECT_EQ(v.image.data()[c * n + p], spec.background[c]);
  }
}

TEST(Render, CentredSphereDepth) {
  SceneSpec spec;
  SceneObject s;
  s.center = Eigen::Vector3d::Zero();
  s.radius = 0.4;
  spec.objects.push_back(s);
  RigConfig rig;
  rig.height = 0.0;
  const ViewSample v = render_view(spec, 0.0, 16, 16, rig);  // principal point at a pixel corner
  // pixel (8, 8) sees the sphere nearly head-on
  const Eigen::Vector3d d = pixel_ray(v, 8, 8);
  const double b = v.pose.origin.dot(d);
  const double expected = -b - std::sqrt(b * b - (rig.radius * rig.radius - 0.16));
  EXPECT_NEAR(v.depth.data()[8 * 16 + 8], expected, 1e-12);
  EXPECT_NEAR(v.depth.data()[8 * 16 + 8], rig.radius - 0.4, 1.5e-2);  // ray 0.037 rad off axis
  // exactly on axis
  const Hit h = trace(spec, v.pose.origin, -v.pose.origin.normalized());
  EXPECT_NEAR(h.t, rig.radius - 0.4, 1e-12);
}

TEST(Render, DepthMatchesIndependentIntersection) {
  for (std::uint64_t seed : {3ull, 11ull, 29ull}) {
    const SceneSpec spec = generate_scene(seed);
    for (double ang : kViewAngles) {
      const ViewSample v = render_view(spec, ang, 24, 24);
      for (std::size_t i = 0; i < 24; ++i)
        for (std::size_t j = 0; j < 24; ++j) {
          const double want = oracle_depth(spec, v.pose.origin, pixel_ray(v, i, j));
          const double got = v.depth.data()[i * 24 + j];
          if (std::isinf(want)) {
            EXPECT_TRUE(std::isinf(got));
            EXPECT_EQ(v.mask[i * 24 + j], 0);
          } else {
            EXPECT_NEAR(got, want, 1e-9);
            EXPECT_EQ(v.mask[i * 24 + j], 1);
          }
        }
    }
  }
}

TEST(Render, ValueRanges) {
  const Dataset d = make_dataset(5, 16, 16, 4);
  // farthest visible point: across the floor disk from the camera
  const RigConfig rig;
  const double bound = std::hypot(rig.radius + kFloorRadius, rig.height);
  for (const auto& s : d.scenes)
    for (const auto& v : s.views) {
      for (double x : v.image.data()) {
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, 1.0);
      }
      for (std::size_t p = 0; p < 256; ++p) {
        if (!v.mask[p]) continue;
        EXPECT_GT(v.depth.data()[p], 0.0);
        EXPECT_LE(v.depth.data()[p], bound + 1e-6);
      }
    }
}

// A surface point seen from one view, when visible from another, belongs to the same object there.
TEST(Render, CrossViewGeometricConsistency) {
  Rng rng(5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SceneSpec spec = generate_scene(seed);
    const SceneViews sv = render_scene(spec, 32, 32);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t a = rng.uniform_int(3), b = (a + 1 + rng.uniform_int(2)) % 3;
      const std::size_t i = rng.uniform_int(32), j = rng.uniform_int(32);
      const ViewSample &va = sv.views[a], &vb = sv.views[b];
      if (!va.mask[i * 32 + j]) continue;
      const Eigen::Vector3d da = pixel_ray(va, i, j);
      const Hit ha = trace(spec, va.pose.origin, da);
      EXPECT_NEAR(va.depth.data()[i * 32 + j], ha.t, 1e-5 * ha.t);  // float32 storage
      const Eigen::Vector3d p = va.pose.origin + ha.t * da;
      const Eigen::Vector3d to_p = p - vb.pose.origin;
      const Hit hb = trace(spec, vb.pose.origin, to_p.normalized());
      if (std::abs(hb.t - to_p.norm()) > 1e-7) continue;  // occluded from b
      EXPECT_EQ(hb.object, ha.object);
      const Eigen::Vector2d uv = project(p, vb.K, vb.pose);
      if (uv.x() >= 0 && uv.x() < 32 && uv.y() >= 0 && uv.y() < 32) ++checked;
    }
    EXPECT_GT(checked, 0) << seed;
  }
}

TEST(Dataset, OneSceneHasThreeViews) {
  const Dataset d = make_dataset(1, 8, 8, 0);
  ASSERT_EQ(d.scenes.size(), 1u);
  ASSERT_EQ(d.scenes[0].views.size(), 3u);
  EXPECT_EQ(d.scenes[0].views[0].role, Role::input);
  EXPECT_EQ(d.scenes[0].views[1].role, Role::target);
  EXPECT_EQ(d.scenes[0].views[2].role, Role::target);
}

TEST(Dataset, Deterministic) {
  EXPECT_TRUE(bit_equal_dataset(make_dataset(3, 16, 16, 9), make_dataset(3, 16, 16, 9)));
  EXPECT_FALSE(bit_equal_dataset(make_dataset(3, 16, 16, 9), make_dataset(3, 16, 16, 10)));
}

TEST(Dataset, WriteReadRoundTripIsBitExact) {
  const Dataset d = make_dataset(4, 16, 24, 17);
  std::stringstream ss;
  write_dataset(ss, d);
  const Dataset r = read_dataset(ss);
  EXPECT_EQ(r.header.n_scenes, 4u);
  EXPECT_EQ(r.header.h, 16u);
  EXPECT_EQ(r.header.w, 24u);
  EXPECT_EQ(r.header.seed, 17u);
  EXPECT_TRUE(bit_equal_dataset(d, r));
}

TEST(Dataset, FileSizeMatchesLayout) {
  const Dataset d = make_dataset(100, 32, 32, 0);
  const auto path = std::filesystem::temp_directory_path() / "raypatch_test_ds.bin";
  write_dataset(path.string(), d);
  const std::uint64_t json = header_json(d.header).size();
  // 12 pose + 4 intrinsics doubles, 3 rgb + 1 depth float planes, one role byte
  const std::uint64_t per_view = 16 * 8 + 4 * 32 * 32 * 4 + 1;
  EXPECT_EQ(std::filesystem::file_size(path), 16 + json + 100 * 3 * per_view);
  EXPECT_EQ(std::filesystem::file_size(path), dataset_file_size(d.header));
  std::filesystem::remove(path);
}

TEST(Dataset, CorruptInputRejected) {
  const Dataset d = make_dataset(1, 8, 8, 0);
  std::stringstream ss;
  write_dataset(ss, d);
  std::string bytes = ss.str();
  {
    std::stringstream t(bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(read_dataset(t), FormatError);
  }
  {
    std::stringstream t(bytes + "x");
    EXPECT_THROW(read_dataset(t), FormatError);
  }
  bytes[0] = 'X';
  std::stringstream t(bytes);
  EXPECT_THROW(read_dataset(t), FormatError);
}
