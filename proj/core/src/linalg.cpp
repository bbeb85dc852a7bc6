#include "framelet/linalg.hpp"

#include <stdexcept>

namespace framelet {

namespace {

template <typename Matrix>
Matrix lstsq_impl(const Matrix& A, const Matrix& B, double ridge) {
  if (A.rows() == 0 || A.cols() == 0) throw std::invalid_argument("lstsq: empty system matrix");
  if (B.rows() != A.rows())
    throw std::invalid_argument("lstsq: right-hand side has " + std::to_string(B.rows()) +
                                " rows, expected " + std::to_string(A.rows()));
  if (ridge < 0.0) throw std::invalid_argument("lstsq: ridge must be nonnegative");

  Matrix gram = A.adjoint() * A;
  gram.diagonal().array() += ridge;
  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("lstsq: LDLT factorization failed");
  if (ridge == 0.0) {
    const auto d = ldlt.vectorD();
    const double dmax = d.cwiseAbs().maxCoeff();
    const double dmin = d.cwiseAbs().minCoeff();
    if (!(dmax > 0.0) || dmin <= dmax * 1e-13 * static_cast<double>(gram.rows()))
      throw std::runtime_error("lstsq: singular normal matrix with ridge = 0");
  }
  return ldlt.solve(Matrix(A.adjoint() * B));
}

}  // namespace

Eigen::VectorXd lstsq(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double ridge) {
  return lstsq_impl<Eigen::MatrixXd>(A, b, ridge);
}

Eigen::VectorXcd lstsq(const Eigen::MatrixXcd& A, const Eigen::VectorXcd& b, double ridge) {
  return lstsq_impl<Eigen::MatrixXcd>(A, b, ridge);
}

Eigen::MatrixXd lstsq(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double ridge) {
  return lstsq_impl<Eigen::MatrixXd>(A, B, ridge);
}

Eigen::MatrixXcd lstsq(const Eigen::MatrixXcd& A, const Eigen::MatrixXcd& B, double ridge) {
  return lstsq_impl<Eigen::MatrixXcd>(A, B, ridge);
}

}  // namespace framelet
