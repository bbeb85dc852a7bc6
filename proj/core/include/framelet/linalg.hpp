#pragma once

#include <Eigen/Dense>

namespace framelet {

// Ridge-regularized least squares: minimizes |A x - b|^2 + ridge * |x|^2.
// Deterministic normal-equations solve with an LDLT factorization. With
// ridge == 0 a numerically singular normal matrix raises std::runtime_error.
Eigen::VectorXd lstsq(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double ridge = 0.0);
Eigen::VectorXcd lstsq(const Eigen::MatrixXcd& A, const Eigen::VectorXcd& b, double ridge = 0.0);

// Multi-right-hand-side variants (one solve, shared factorization).
Eigen::MatrixXd lstsq(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double ridge = 0.0);
Eigen::MatrixXcd lstsq(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B, double ridge = 0.0);

}  // namespace framelet
