#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "raypatch/errors.hpp"
#include "raypatch/tensor.hpp"

namespace raypatch {

// Pinhole intrinsics in pixels.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera intrinsics: focal lengths must be positive");
  }

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  // K^-1 applied to a homogeneous pixel.
  Eigen::Vector3d unproject(const Eigen::Vector3d& x) const {
    return {(x.x() - cx * x.z()) / fx, (x.y() - cy * x.z()) / fy, x.z()};
  }

  // Vertical field of view, square pixels, principal point at the image centre.
  static CameraIntrinsics from_fov(std::size_t h, std::size_t w, double vfov_deg) {
    const double f = 0.5 * static_cast<double>(h) / std::tan(0.5 * vfov_deg * M_PI / 180.0);
    return {f, f, 0.5 * static_cast<double>(w), 0.5 * static_cast<double>(h)};
  }
};

// World-from-camera transform [R | o]. Camera axes: x right, y down, z forward.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();

  void validate(double tol = 1e-9) const {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho > tol || std::abs(rotation.determinant() - 1.0) > tol) {
      throw ConfigError("camera pose: rotation is not in SO(3)");
    }
  }

  static CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                            const Eigen::Vector3d& up = Eigen::Vector3d::UnitZ()) {
    const Eigen::Vector3d forward = (target - eye).normalized();
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    CameraPose pose;
    pose.rotation.col(0) = right;
    pose.rotation.col(1) = down;
    pose.rotation.col(2) = forward;
    pose.origin = eye;
    return pose;
  }
};

// Square k x k tiling of an h x w image.
struct PatchGrid {
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t k = 1;

  void validate() const {
    if (h == 0 || w == 0 || k == 0) throw ConfigError("patch grid: sizes must be positive");
    if (h % k != 0 || w % k != 0) {
      throw ConfigError("patch grid: patch size " + std::to_string(k) + " does not divide " + std::to_string(h) +
                        "x" + std::to_string(w));
    }
  }
  std::size_t rows() const { return h / k; }
  std::size_t cols() const { return w / k; }
  std::size_t count() const { return rows() * cols(); }
};

// Query parametrization: Fourier octaves for origin and direction. Origins
// are divided by scene_radius first so their components stay in [-1, 1].
struct EncodingConfig {
  int freq_origin = 10;
  int freq_direction = 10;
  double scene_radius = 3.0;
  bool include_raw = false;

  std::size_t size() const {
    return static_cast<std::size_t>(2 * freq_origin * 3 + 2 * freq_direction * 3) + (include_raw ? 6 : 0);
  }
};

struct PatchQuery {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;
  std::vector<double> encoding;
};

// Pixel-centre convention: patch (i, j) is centred at ((j + .5) k, (i + .5) k).
// Row-major over the grid; returned as homogeneous (u, v, 1).
inline std::vector<Eigen::Vector3d> patch_centers(const PatchGrid& grid) {
  grid.validate();
  std::vector<Eigen::Vector3d> centers;
  centers.reserve(grid.count());
  const double k = static_cast<double>(grid.k);
  for (std::size_t i = 0; i < grid.rows(); ++i)
    for (std::size_t j = 0; j < grid.cols(); ++j)
      centers.emplace_back((static_cast<double>(j) + 0.5) * k, (static_cast<double>(i) + 0.5) * k, 1.0);
  return centers;
}

// Unit world-frame direction of the ray through homogeneous pixel x.
// Directions are rotated only; the origin is carried separately.
inline Eigen::Vector3d unproject(const Eigen::Vector3d& x, const CameraIntrinsics& K, const CameraPose& pose) {
  return (pose.rotation * K.unproject(x)).normalized();
}

// Pixel (u, v) of a world point in front of the camera.
inline Eigen::Vector2d project(const Eigen::Vector3d& point, const CameraIntrinsics& K, const CameraPose& pose) {
  const Eigen::Vector3d cam = pose.rotation.transpose() * (point - pose.origin);
  return {K.fx * cam.x() / cam.z() + K.cx, K.fy * cam.y() / cam.z() + K.cy};
}

// gamma(v): for each component, [sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(F-1) pi v), cos(...)].
inline std::vector<double> fourier_encode(std::span<const double> v, int freqs) {
  if (freqs < 1) throw ConfigError("fourier_encode: frequency count must be >= 1");
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(freqs) * v.size());
  for (double c : v) {
    double scale = M_PI;
    for (int f = 0; f < freqs; ++f) {
      out.push_back(std::sin(scale * c));
      out.push_back(std::cos(scale * c));
      scale *= 2.0;
    }
  }
  return out;
}

inline std::vector<double> encode_ray(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction,
                                      const EncodingConfig& enc) {
  const Eigen::Vector3d o = origin / enc.scene_radius;
  std::vector<double> out = fourier_encode(std::span<const double>(o.data(), 3), enc.freq_origin);
  const std::vector<double> d = fourier_encode(std::span<const double>(direction.data(), 3), enc.freq_direction);
  out.insert(out.end(), d.begin(), d.end());
  if (enc.include_raw) {
    out.insert(out.end(), o.data(), o.data() + 3);
    out.insert(out.end(), direction.data(), direction.data() + 3);
  }
  return out;
}

inline PatchQuery make_query(const Eigen::Vector3d& x, const CameraIntrinsics& K, const CameraPose& pose,
                             const EncodingConfig& enc) {
  PatchQuery q;
  q.origin = pose.origin;
  q.direction = unproject(x, K, pose);
  q.encoding = encode_ray(q.origin, q.direction, enc);
  return q;
}

// One encoded query per patch, [hw/k^2, d_q], rows in patch-grid order.
inline Tensor build_queries(const PatchGrid& grid, const CameraIntrinsics& K, const CameraPose& pose,
                            const EncodingConfig& enc) {
  K.validate();
  const auto centers = patch_centers(grid);
  const std::size_t d = enc.size();
  Tensor out({centers.size(), d});
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const PatchQuery q = make_query(centers[i], K, pose, enc);
    std::copy(q.encoding.begin(), q.encoding.end(), ys.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

// Per-pixel ray encoding laid out as an image, [d_q, h, w].
inline Tensor ray_feature_map(std::size_t h, std::size_t w, const CameraIntrinsics& K, const CameraPose& pose,
                              const EncodingConfig& enc) {
  const Tensor q = build_queries({h, w, 1}, K, pose, enc);
  const std::size_t d = enc.size(), n = h * w;
  Tensor out({d, h, w});
  auto xs = q.data();
  auto ys = out.mutable_data();
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < d; ++c) ys[c * n + p] = xs[p * d + c];
  return out;
}

// [C, H, W] -> [HW/k^2, C, k, k], patches in patch-grid order.
inline Tensor split_patches(const Tensor& img, std::size_t k) {
  if (img.rank() != 3) throw ShapeError("split_patches: expected [C,H,W], got " + shape_str(img.shape()));
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const PatchGrid grid{h, w, k};
  grid.validate();
  Tensor out({grid.count(), c, k, k});
  auto xs = img.data();
  auto ys = out.mutable_data();
  for (std::size_t pi = 0; pi < grid.rows(); ++pi)
    for (std::size_t pj = 0; pj < grid.cols(); ++pj) {
      const std::size_t p = pi * grid.cols() + pj;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < k; ++y)
          for (std::size_t x = 0; x < k; ++x)
            ys[((p * c + ch) * k + y) * k + x] = xs[(ch * h + pi * k + y) * w + pj * k + x];
    }
  return out;
}

// Inverse of split_patches.
inline Tensor assemble_patches(const Tensor& patches, std::size_t h, std::size_t w) {
  if (patches.rank() != 4 || patches.dim(2) != patches.dim(3)) {
    throw ShapeError("assemble_patches: expected [P,C,k,k], got " + shape_str(patches.shape()));
  }
  const std::size_t c = patches.dim(1), k = patches.dim(2);
  const PatchGrid grid{h, w, k};
  grid.validate();
  if (patches.dim(0) != grid.count()) throw ShapeError("assemble_patches: patch count does not match image size");
  Tensor out({c, h, w});
  auto xs = patches.data();
  auto ys = out.mutable_data();
  for (std::size_t pi = 0; pi < grid.rows(); ++pi)
    for (std::size_t pj = 0; pj < grid.cols(); ++pj) {
      const std::size_t p = pi * grid.cols() + pj;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < k; ++y)
          for (std::size_t x = 0; x < k; ++x)
            ys[(ch * h + pi * k + y) * w + pj * k + x] = xs[((p * c + ch) * k + y) * k + x];
    }
  return out;
}

}  // namespace raypatch
