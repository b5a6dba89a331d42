// Internal Eigen interop. Eigen is a build-time implementation detail of
// icl_core and must not leak into public headers.
#pragma once

#include <Eigen/Dense>

#include "icl/linalg.hpp"

namespace icl::linalg {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using EConstMap = Eigen::Map<const EMatrix>;
using EVecMap = Eigen::Map<Eigen::VectorXd>;
using EVecConstMap = Eigen::Map<const Eigen::VectorXd>;

inline EConstMap as_eigen(const Matrix& m) {
  return EConstMap(m.data(), static_cast<Eigen::Index>(m.rows()),
                   static_cast<Eigen::Index>(m.cols()));
}

inline EMap as_eigen(Matrix& m) {
  return EMap(m.data(), static_cast<Eigen::Index>(m.rows()),
              static_cast<Eigen::Index>(m.cols()));
}

inline EVecConstMap as_eigen(const Vector& v) {
  return EVecConstMap(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Matrix from_eigen(const Eigen::Ref<const EMatrix>& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  as_eigen(m) = e;
  return m;
}

inline Vector vector_from_eigen(const Eigen::Ref<const Eigen::VectorXd>& e) {
  return Vector(e.data(), e.data() + e.size());
}

}  // namespace icl::linalg
