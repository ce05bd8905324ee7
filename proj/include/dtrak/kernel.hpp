#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "dtrak/errors.hpp"
#include "dtrak/schedule.hpp"

namespace dtrak {

enum class KernelSolver { kCholesky, kLeastSquares };

inline std::string solver_name(KernelSolver s) {
  return s == KernelSolver::kCholesky ? "cholesky" : "least-squares";
}

inline KernelSolver parse_solver(const std::string& s) {
  if (s == "cholesky") return KernelSolver::kCholesky;
  if (s == "least-squares" || s == "lstsq") return KernelSolver::kLeastSquares;
  throw ParameterError("unknown kernel solver '" + s + "'");
}

struct KernelConfig {
  /// Ridge added as lambda * I to Phi^T Phi (no division by N).
  double lambda = 0.0;
  KernelSolver solver = KernelSolver::kCholesky;
};

/// {1, 2, 5} x 10^e for e in [-2, 6]: 1e-2, 2e-2, 5e-2, ..., 1e6, 2e6, 5e6.
inline std::vector<double> lambda_grid() {
  std::vector<double> grid;
  for (int e = -2; e <= 6; ++e) {
    for (const char* m : {"1", "2", "5"}) grid.push_back(std::stod(std::string(m) + "e" + std::to_string(e)));
  }
  return grid;
}

namespace detail {

/// Smallest squared pivot we accept relative to the largest diagonal entry.
inline bool pivot_too_small(double pivot_sq, double max_diag, Eigen::Index n) {
  return !(pivot_sq > static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag);
}

/// Cholesky factor of a symmetric positive definite matrix or SingularityError.
inline Eigen::LLT<Mat> checked_llt(const Mat& a, const std::string& what) {
  Eigen::LLT<Mat> llt(a);
  const double max_diag = a.diagonal().cwiseAbs().maxCoeff();
  bool singular = llt.info() != Eigen::Success || !(max_diag > 0.0);
  if (!singular) {
    const Mat& l = llt.matrixLLT();
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      if (pivot_too_small(l(i, i) * l(i, i), max_diag, a.rows())) singular = true;
    }
  }
  if (singular) throw SingularityError(what + ": matrix is singular (cholesky solver)");
  return llt;
}

}  // namespace detail

/// Applies v -> (Phi^T Phi + lambda I)^{-1} v without forming the inverse.
/// Cholesky factors the k x k kernel; LeastSquares factors the stacked
/// matrix [Phi; sqrt(lambda) I] = Q R and solves R^T R x = v.
class KernelPreconditioner {
 public:
  KernelPreconditioner(const Mat& phi, KernelConfig cfg) : cfg_(cfg), k_(phi.cols()) {
    if (k_ < 1) throw ShapeError("kernel needs k >= 1");
    if (!(cfg.lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
    if (cfg.solver == KernelSolver::kCholesky) {
      Mat a = phi.transpose() * phi;
      a.diagonal().array() += cfg.lambda;
      llt_ = detail::checked_llt(a, "kernel_precondition");
    } else {
      Mat stacked = Mat::Zero(phi.rows() + k_, k_);
      stacked.topRows(phi.rows()) = phi;
      stacked.bottomRows(k_).diagonal().setConstant(std::sqrt(cfg.lambda));
      Eigen::HouseholderQR<Mat> qr(stacked);
      r_ = qr.matrixQR().topRows(k_).triangularView<Eigen::Upper>();
      const double max_diag = stacked.colwise().squaredNorm().maxCoeff();
      for (Eigen::Index i = 0; i < k_; ++i) {
        if (detail::pivot_too_small(r_(i, i) * r_(i, i), max_diag, k_) || !(max_diag > 0.0)) {
          throw SingularityError("kernel_precondition: matrix is singular (least-squares solver)");
        }
      }
    }
  }

  const KernelConfig& config() const { return cfg_; }
  Eigen::Index k() const { return k_; }

  /// Columns of `v` are solved independently.
  Mat apply(const Mat& v) const {
    if (v.rows() != k_) throw ShapeError("preconditioner expects k = " + std::to_string(k_));
    if (cfg_.solver == KernelSolver::kCholesky) return llt_.solve(v);
    const Mat y = r_.transpose().triangularView<Eigen::Lower>().solve(v);
    return r_.triangularView<Eigen::Upper>().solve(y);
  }

  Vec apply(const Vec& v) const { return apply(Mat(v)).col(0); }

 private:
  KernelConfig cfg_;
  Eigen::Index k_;
  Eigen::LLT<Mat> llt_;
  Mat r_;
};

inline KernelPreconditioner kernel_precondition(const Mat& phi, KernelConfig cfg) {
  return KernelPreconditioner(phi, cfg);
}

}  // namespace dtrak
