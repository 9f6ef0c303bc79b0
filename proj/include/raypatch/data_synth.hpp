#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "raypatch/errors.hpp"
#include "raypatch/geometry.hpp"
#include "raypatch/rng.hpp"
#include "raypatch/tensor.hpp"

// Procedural multi-view scenes: 2-4 spheres or axis-aligned boxes resting on
// a floor disk (z-up world), rendered by analytic ray casting from cameras on
// a circle around the origin.
namespace raypatch::data {

enum class ShapeKind : std::uint8_t { sphere, box };

struct SceneObject {
  ShapeKind kind = ShapeKind::sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.25;                                        // sphere
  Eigen::Vector3d half_extent = Eigen::Vector3d::Constant(0.2);  // box
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);

  // Radius of the sphere about `center` that encloses the object.
  double bounding_radius() const { return kind == ShapeKind::sphere ? radius : half_extent.norm(); }
};

// A default-constructed spec is empty: no objects and no floor.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  double floor_radius = 0.0;  // 0 disables the floor
  Eigen::Vector3d floor_color = Eigen::Vector3d::Constant(0.5);
  Eigen::Vector3d background = Eigen::Vector3d(0.1, 0.1, 0.15);
  Eigen::Vector3d light = Eigen::Vector3d(0.0, 0.0, 1.0);  // unit, towards the light
  double ambient = 0.3;
};

struct RigConfig {
  double radius = 2.5;
  double height = 0.8;
  double vfov_deg = 45.0;
};

inline constexpr int kMiss = -2;
inline constexpr int kFloor = -1;

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int object = kMiss;  // index into objects, kFloor or kMiss
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
};

inline double intersect_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c, double r) {
  const Eigen::Vector3d oc = o - c;
  const double b = oc.dot(d);
  const double disc = b * b - (oc.squaredNorm() - r * r);
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double s = std::sqrt(disc);
  if (-b - s > 0.0) return -b - s;
  if (-b + s > 0.0) return -b + s;
  return std::numeric_limits<double>::infinity();
}

// Slab method; writes the outward face normal on a hit.
inline double intersect_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& c,
                            const Eigen::Vector3d& half, Eigen::Vector3d* normal) {
  double t_near = -std::numeric_limits<double>::infinity(), t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = c[a] - half[a], hi = c[a] + half[a];
    if (d[a] == 0.0) {
      if (o[a] < lo || o[a] > hi) return std::numeric_limits<double>::infinity();
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
      sign = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= 0.0 || axis < 0) return std::numeric_limits<double>::infinity();
  if (normal) {
    *normal = Eigen::Vector3d::Zero();
    (*normal)[axis] = sign;
  }
  return t_near;
}

inline double intersect_floor(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double floor_radius) {
  if (floor_radius <= 0.0 || d.z() == 0.0) return std::numeric_limits<double>::infinity();
  const double t = -o.z() / d.z();
  if (t <= 0.0) return std::numeric_limits<double>::infinity();
  const Eigen::Vector3d p = o + t * d;
  if (p.head<2>().norm() > floor_radius) return std::numeric_limits<double>::infinity();
  return t;
}

// Closest hit along a unit-direction ray.
inline Hit trace(const SceneSpec& spec, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  Hit hit;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const SceneObject& obj = spec.objects[i];
    Eigen::Vector3d n;
    double t;
    if (obj.kind == ShapeKind::sphere) {
      t = intersect_sphere(o, d, obj.center, obj.radius);
      if (t < hit.t) n = (o + t * d - obj.center) / obj.radius;
    } else {
      t = intersect_box(o, d, obj.center, obj.half_extent, &n);
    }
    if (t < hit.t) {
      hit.t = t;
      hit.object = static_cast<int>(i);
      hit.normal = n;
    }
  }
  const double tf = intersect_floor(o, d, spec.floor_radius);
  if (tf < hit.t) {
    hit.t = tf;
    hit.object = kFloor;
    hit.normal = Eigen::Vector3d::UnitZ();
  }
  return hit;
}

inline Eigen::Vector3d shade(const SceneSpec& spec, const Hit& hit) {
  if (hit.object == kMiss) return spec.background;
  const Eigen::Vector3d albedo = hit.object == kFloor ? spec.floor_color : spec.objects[hit.object].color;
  const double lambert = std::max(0.0, hit.normal.dot(spec.light));
  const Eigen::Vector3d c = albedo * (spec.ambient + (1.0 - spec.ambient) * lambert);
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

inline Eigen::Vector3d hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Eigen::Vector3d rgb;
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  return rgb + Eigen::Vector3d::Constant(v - c);
}

inline constexpr double kFloorRadius = 1.5;

// Objects rest on the floor, do not overlap, and every point of every object
// lies within distance 1 of the origin.
inline SceneSpec generate_scene(std::uint64_t seed) {
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.floor_radius = kFloorRadius;
  const double g = rng.uniform(0.45, 0.65);
  spec.floor_color = Eigen::Vector3d::Constant(g);
  const double az = rng.uniform(0.0, 2.0 * M_PI);
  spec.light = Eigen::Vector3d(0.6 * std::cos(az), 0.6 * std::sin(az), 1.0).normalized();
  const std::size_t count = 2 + rng.uniform_int(3);
  while (spec.objects.size() < count) {
    SceneObject obj;
    obj.kind = rng.uniform() < 0.5 ? ShapeKind::sphere : ShapeKind::box;
    if (obj.kind == ShapeKind::sphere) {
      obj.radius = rng.uniform(0.18, 0.32);
    } else {
      obj.half_extent = {rng.uniform(0.12, 0.22), rng.uniform(0.12, 0.22), rng.uniform(0.12, 0.22)};
    }
    const double height = obj.kind == ShapeKind::sphere ? obj.radius : obj.half_extent.z();
    const double r = obj.bounding_radius();
    const double reach = 1.0 - r;
    const double rho = reach * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    obj.center = {rho * std::cos(phi), rho * std::sin(phi), height};
    obj.color = hsv_to_rgb(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
    bool ok = obj.center.norm() + r <= 1.0;
    for (const SceneObject& other : spec.objects) {
      ok = ok && (obj.center - other.center).norm() >= r + other.bounding_radius();
    }
    if (ok) spec.objects.push_back(obj);
  }
  return spec;
}

inline CameraPose rig_pose(double angle_deg, const RigConfig& rig = {}) {
  const double a = angle_deg * M_PI / 180.0;
  return CameraPose::look_at({rig.radius * std::cos(a), rig.radius * std::sin(a), rig.height}, Eigen::Vector3d::Zero());
}

inline CameraIntrinsics rig_intrinsics(std::size_t h, std::size_t w, const RigConfig& rig = {}) {
  return CameraIntrinsics::from_fov(h, w, rig.vfov_deg);
}

enum class Role : std::uint8_t { input = 0, target = 1 };

struct ViewSample {
  Tensor image;                    // [3, h, w] in [0, 1]
  Tensor depth;                    // [1, h, w], +inf where mask is 0
  std::vector<std::uint8_t> mask;  // 1 where a surface was hit
  CameraIntrinsics K;
  CameraPose pose;
  Role role = Role::target;
};

// Depth is the distance along the unit ray through the pixel centre.
inline ViewSample render_view(const SceneSpec& spec, double angle_deg, std::size_t h, std::size_t w,
                              const RigConfig& rig = {}) {
  if (h < 8 || w < 8) throw ConfigError("render_view: image must be at least 8x8");
  ViewSample v;
  v.K = rig_intrinsics(h, w, rig);
  v.pose = rig_pose(angle_deg, rig);
  v.image = Tensor({3, h, w});
  v.depth = Tensor({1, h, w});
  v.mask.assign(h * w, 0);
  auto img = v.image.mutable_data();
  auto dep = v.depth.mutable_data();
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const Eigen::Vector3d x(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5, 1.0);
      const Eigen::Vector3d d = unproject(x, v.K, v.pose);
      const Hit hit = trace(spec, v.pose.origin, d);
      const Eigen::Vector3d c = shade(spec, hit);
      const std::size_t p = i * w + j;
      for (int ch = 0; ch < 3; ++ch) img[ch * n + p] = c[ch];
      dep[p] = hit.t;
      v.mask[p] = hit.object != kMiss ? 1 : 0;
    }
  return v;
}

struct SceneViews {
  std::vector<ViewSample> views;
};

struct DatasetHeader {
  std::uint64_t n_scenes = 0;
  std::uint64_t h = 0;
  std::uint64_t w = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SceneViews> scenes;
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kViewsPerScene = 3;
inline constexpr double kViewAngles[kViewsPerScene] = {0.0, 120.0, 240.0};

inline std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t s = seed ^ (0x9E3779B97F4A7C15ULL * (index + 1));
  return splitmix64(s);
}

// Stored precision is float32; in-memory samples are rounded to it so that a
// written and re-read dataset compares equal.
inline void quantize(ViewSample& v) {
  for (double& x : v.image.mutable_data()) x = static_cast<double>(static_cast<float>(x));
  for (double& x : v.depth.mutable_data()) x = static_cast<double>(static_cast<float>(x));
}

inline SceneViews render_scene(const SceneSpec& spec, std::size_t h, std::size_t w, const RigConfig& rig = {}) {
  SceneViews s;
  for (std::size_t i = 0; i < kViewsPerScene; ++i) {
    ViewSample v = render_view(spec, kViewAngles[i], h, w, rig);
    v.role = i == 0 ? Role::input : Role::target;
    quantize(v);
    s.views.push_back(std::move(v));
  }
  return s;
}

inline Dataset make_dataset(std::uint64_t n_scenes, std::size_t h, std::size_t w, std::uint64_t seed) {
  Dataset d;
  d.header = {n_scenes, h, w, seed};
  for (std::uint64_t i = 0; i < n_scenes; ++i) d.scenes.push_back(render_scene(generate_scene(scene_seed(seed, i)), h, w));
  return d;
}

inline std::string header_json(const DatasetHeader& h) {
  return nlohmann::json{{"n_scenes", h.n_scenes}, {"h", h.h}, {"w", h.w}, {"seed", h.seed}}.dump();
}

inline std::uint64_t view_record_bytes(std::uint64_t h, std::uint64_t w) {
  return 12 * 8 + 4 * 8 + 3 * h * w * 4 + h * w * 4 + 1;
}

// magic + version + json length + json + per-view records.
inline std::uint64_t dataset_file_size(const DatasetHeader& h) {
  return 4 + 4 + 8 + header_json(h).size() + h.n_scenes * kViewsPerScene * view_record_bytes(h.h, h.w);
}

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw FormatError(std::string("truncated file while reading ") + what);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_dataset(std::ostream& os, const Dataset& d) {
  static_assert(std::endian::native == std::endian::little, "dataset format is little-endian");
  const std::string js = header_json(d.header);
  os.write("RPDS", 4);
  detail::put<std::uint32_t>(os, kDatasetVersion);
  detail::put<std::uint64_t>(os, js.size());
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  const std::size_t n = d.header.h * d.header.w;
  for (const SceneViews& s : d.scenes) {
    if (s.views.size() != kViewsPerScene) throw FormatError("write_dataset: every scene needs exactly 3 views");
    for (const ViewSample& v : s.views) {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) detail::put<double>(os, v.pose.rotation(r, c));
      for (int c = 0; c < 3; ++c) detail::put<double>(os, v.pose.origin[c]);
      for (double k : {v.K.fx, v.K.fy, v.K.cx, v.K.cy}) detail::put<double>(os, k);
      for (double x : v.image.data()) detail::put<float>(os, static_cast<float>(x));
      for (std::size_t p = 0; p < n; ++p) {
        detail::put<float>(os, v.mask[p] ? static_cast<float>(v.depth.data()[p]) : std::numeric_limits<float>::quiet_NaN());
      }
      detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(v.role));
    }
  }
  if (!os) throw FormatError("write_dataset: write failed");
}

inline void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_dataset(os, d);
}

inline Dataset read_dataset(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RPDS", 4) != 0) throw FormatError("not a dataset file (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(is, "header length");
  if (len > (1u << 20)) throw FormatError("dataset header too large");
  std::string js(len, '\0');
  if (!is.read(js.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated dataset header");
  Dataset d;
  try {
    const auto j = nlohmann::json::parse(js);
    d.header = {j.at("n_scenes").get<std::uint64_t>(), j.at("h").get<std::uint64_t>(), j.at("w").get<std::uint64_t>(),
                j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset header: ") + e.what());
  }
  const std::size_t h = d.header.h, w = d.header.w, n = h * w;
  if (h == 0 || w == 0) throw FormatError("dataset header has zero image size");
  for (std::uint64_t s = 0; s < d.header.n_scenes; ++s) {
    SceneViews sv;
    for (std::size_t i = 0; i < kViewsPerScene; ++i) {
      ViewSample v;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) v.pose.rotation(r, c) = detail::get<double>(is, "pose");
      for (int c = 0; c < 3; ++c) v.pose.origin[c] = detail::get<double>(is, "pose");
      v.K.fx = detail::get<double>(is, "intrinsics");
      v.K.fy = detail::get<double>(is, "intrinsics");
      v.K.cx = detail::get<double>(is, "intrinsics");
      v.K.cy = detail::get<double>(is, "intrinsics");
      v.image = Tensor({3, h, w});
      for (double& x : v.image.mutable_data()) x = detail::get<float>(is, "image");
      v.depth = Tensor({1, h, w});
      v.mask.assign(n, 0);
      auto dep = v.depth.mutable_data();
      for (std::size_t p = 0; p < n; ++p) {
        const float f = detail::get<float>(is, "depth");
        v.mask[p] = std::isnan(f) ? 0 : 1;
        dep[p] = std::isnan(f) ? std::numeric_limits<double>::infinity() : static_cast<double>(f);
      }
      const auto role = detail::get<std::uint8_t>(is, "role");
      if (role > 1) throw FormatError("bad view role byte");
      v.role = static_cast<Role>(role);
      sv.views.push_back(std::move(v));
    }
    d.scenes.push_back(std::move(sv));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after dataset records");
  return d;
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset '" + path + "'");
  return read_dataset(is);
}

}  // namespace raypatch::data
