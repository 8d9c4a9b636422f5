#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "xdr/core/error.hpp"
#include "xdr/util/log.hpp"

namespace xdr::eval {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Descriptor rows tagged with the split they came from.
struct DescriptorSet {
  Matrix rows;
  std::string split;
};

/// Mean-centering plus full-rank PCA rotation (no reduction, no whitening)
/// and an optional signed square root.
struct DescriptorPipeline {
  Eigen::VectorXd mean;
  Eigen::MatrixXd rotation;     // columns are the basis, sorted by descending variance
  Eigen::VectorXd eigenvalues;  // floored at kEigenFloor
  bool signed_sqrt = true;
  std::string fitted_on;

  int dim() const { return static_cast<int>(mean.size()); }

  /// center, rotate, then sign(x) * sqrt(|x|) element-wise.
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    if (x.size() != mean.size()) throw ValidationError("descriptor dimension differs from the fitted pipeline");
    Eigen::VectorXd y = rotation.transpose() * (x - mean);
    if (signed_sqrt)
      for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = std::copysign(std::sqrt(std::abs(y[i])), y[i]);
    return y;
  }

  Matrix apply_rows(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = apply(x.row(r).transpose()).transpose();
    return out;
  }
};

inline constexpr double kEigenFloor = 1e-10;

/// Fits on training-split descriptors only. Eigenvectors are sign-fixed so
/// the largest-magnitude component of each is positive.
inline DescriptorPipeline fit_descriptor_pipeline(const DescriptorSet& train, bool signed_sqrt = true) {
  if (train.split != "train")
    throw ValidationError("descriptor pipeline must be fitted on the training split, got '" + train.split + "'");
  const Matrix& x = train.rows;
  if (x.rows() < 2) throw ValidationError("descriptor pipeline needs at least 2 descriptors");
  DescriptorPipeline p;
  p.signed_sqrt = signed_sqrt;
  p.fitted_on = train.split;
  p.mean = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error("PCA eigendecomposition failed");
  const Eigen::Index d = cov.rows();
  p.rotation.resize(d, d);
  p.eigenvalues.resize(d);
  bool floored = false;
  for (Eigen::Index k = 0; k < d; ++k) {
    const Eigen::Index src = d - 1 - k;  // solver sorts ascending
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i)
      if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
    if (v[arg] < 0) v = -v;
    p.rotation.col(k) = v;
    double ev = solver.eigenvalues()[src];
    if (ev < kEigenFloor) {
      ev = kEigenFloor;
      floored = true;
    }
    p.eigenvalues[k] = ev;
  }
  if (floored) log::warn("descriptor covariance is rank-deficient; eigenvalues floored at 1e-10");
  return p;
}

}  // namespace xdr::eval
