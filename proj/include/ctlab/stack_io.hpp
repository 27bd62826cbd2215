#pragma once

// Trained-stack container: versioned binary, little-endian, raw IEEE doubles
// so save -> load -> evaluate reproduces in-memory evaluation bit for bit.
//
// Layout: magic "CTLSTK01", u32 version, schedule (T, c0, c1), dim,
// class-descriptor string, then one tagged model record per step t = 1..T.

#include <cstring>
#include <fstream>

#include "ctlab/consistency.hpp"

namespace ctlab {

namespace detail {

constexpr char kStackMagic[8] = {'C', 'T', 'L', 'S', 'T', 'K', '0', '1'};
constexpr std::uint32_t kStackVersion = 1;

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}
inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (!is) throw std::runtime_error("stack file: truncated");
}
inline void put_u32(std::ostream& os, std::uint32_t v) { put_bytes(os, &v, 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_bytes(os, &v, 8); }
inline void put_f64(std::ostream& os, double v) { put_bytes(os, &v, 8); }
inline std::uint32_t get_u32(std::istream& is) { std::uint32_t v; get_bytes(is, &v, 4); return v; }
inline std::uint64_t get_u64(std::istream& is) { std::uint64_t v; get_bytes(is, &v, 8); return v; }
inline double get_f64(std::istream& is) { double v; get_bytes(is, &v, 8); return v; }

inline void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  put_bytes(os, s.data(), s.size());
}
inline std::string get_string(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  if (n > (1ull << 20)) throw std::runtime_error("stack file: implausible string length");
  std::string s(n, '\0');
  if (n) get_bytes(is, s.data(), n);
  return s;
}
inline void put_mat(std::ostream& os, const Mat& m) {
  put_u64(os, std::uint64_t(m.rows()));
  put_u64(os, std::uint64_t(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(os, m(i, j));
}
inline Mat get_mat(std::istream& is) {
  const auto r = get_u64(is), c = get_u64(is);
  if (r * c > (1ull << 30)) throw std::runtime_error("stack file: implausible matrix size");
  Mat m{Eigen::Index(r), Eigen::Index(c)};
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get_f64(is);
  return m;
}
inline void put_vec(std::ostream& os, const Vec& v) { put_mat(os, Mat(v.transpose())); }
inline Vec get_vec(std::istream& is) {
  Mat m = get_mat(is);
  return m.row(0).transpose();
}

enum ModelTag : std::uint32_t { tag_affine = 1, tag_axis_profile = 2, tag_knn = 3 };

inline void put_model(std::ostream& os, const Model& m) {
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, AffineMapModel>) {
          put_u32(os, tag_affine);
          put_mat(os, v.A);
          put_vec(os, v.b);
        } else if constexpr (std::is_same_v<T, AxisProfileModel>) {
          put_u32(os, tag_axis_profile);
          put_f64(os, v.gamma);
          put_vec(os, v.axis);
          put_u64(os, v.u.size());
          for (double d : v.u) put_f64(os, d);
          put_mat(os, v.values);
          put_mat(os, v.slopes);
          put_f64(os, v.build_tolerance);
        } else {
          put_u32(os, tag_knn);
          put_u32(os, std::uint32_t(v.k));
          put_f64(os, v.bandwidth);
          put_mat(os, v.X);
          put_mat(os, v.Y);
        }
      },
      m);
}

inline Model get_model(std::istream& is) {
  const std::uint32_t tag = get_u32(is);
  switch (tag) {
    case tag_affine: {
      AffineMapModel m;
      m.A = get_mat(is);
      m.b = get_vec(is);
      return m;
    }
    case tag_axis_profile: {
      AxisProfileModel m;
      m.gamma = get_f64(is);
      m.axis = get_vec(is);
      const std::uint64_t n = get_u64(is);
      m.u.resize(n);
      for (auto& d : m.u) d = get_f64(is);
      m.values = get_mat(is);
      m.slopes = get_mat(is);
      m.build_tolerance = get_f64(is);
      return m;
    }
    case tag_knn: {
      KnnModel m;
      m.k = int(get_u32(is));
      m.bandwidth = get_f64(is);
      m.X = get_mat(is);
      m.Y = get_mat(is);
      return m;
    }
    default:
      throw std::runtime_error("stack file: unknown model tag " + std::to_string(tag));
  }
}

}  // namespace detail

inline void save_stack(const ConsistencyStack& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open stack file for writing: " + path);
  detail::put_bytes(os, detail::kStackMagic, 8);
  detail::put_u32(os, detail::kStackVersion);
  detail::put_u64(os, std::uint64_t(st.schedule.T));
  detail::put_f64(os, st.schedule.c0);
  detail::put_f64(os, st.schedule.c1);
  detail::put_u32(os, std::uint32_t(st.d));
  detail::put_string(os, st.spec.descriptor());
  detail::put_u64(os, std::uint64_t(st.schedule.T));
  for (int t = 1; t <= st.schedule.T; ++t) detail::put_model(os, st.model(t));
  if (!os) throw std::runtime_error("stack file: write failed: " + path);
}

inline ConsistencyStack load_stack(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open stack file: " + path);
  char magic[8];
  detail::get_bytes(is, magic, 8);
  if (std::memcmp(magic, detail::kStackMagic, 8) != 0)
    throw std::runtime_error("stack file: bad magic (not a stack container): " + path);
  const std::uint32_t version = detail::get_u32(is);
  if (version != detail::kStackVersion)
    throw std::runtime_error("stack file: version " + std::to_string(version) +
                             " not supported (expected " +
                             std::to_string(detail::kStackVersion) + ")");
  ConsistencyStack st;
  const int T = int(detail::get_u64(is));
  const double c0 = detail::get_f64(is);
  const double c1 = detail::get_f64(is);
  st.schedule = build_schedule(T, c0, c1);
  st.d = int(detail::get_u32(is));
  (void)detail::get_string(is);  // descriptor, informational
  const std::uint64_t n = detail::get_u64(is);
  if (int(n) != T) throw std::runtime_error("stack file: model count mismatch");
  st.models.resize(std::size_t(T) + 1);
  for (int t = 1; t <= T; ++t) st.models[std::size_t(t)] = detail::get_model(is);
  return st;
}

}  // namespace ctlab
