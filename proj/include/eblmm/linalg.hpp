#ifndef EBLMM_LINALG_HPP
#define EBLMM_LINALG_HPP

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>

#include "eblmm/error.hpp"

namespace eblmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Factorization is attempted once as given; on failure a jitter of
/// 1e-10 * trace / n is added to the diagonal and the factorization retried
/// exactly once. A second failure is a NumericalError that reports the
/// smallest LDLT pivot of the original matrix.
class SpdFactor {
public:
    SpdFactor() = default;

    explicit SpdFactor(const MatrixXd& a, std::string_view what = "matrix") { compute(a, what); }

    void compute(const MatrixXd& a, std::string_view what = "matrix") {
        const Eigen::Index n = a.rows();
        if (n != a.cols()) {
            throw NumericalError(std::string(what) + " is not square");
        }
        jitter_ = 0.0;
        llt_.compute(a);
        if (llt_.info() == Eigen::Success && diagonal_ok()) {
            return;
        }
        const double bump = n > 0 ? 1e-10 * a.trace() / static_cast<double>(n) : 0.0;
        if (bump > 0.0 && std::isfinite(bump)) {
            MatrixXd jittered = a;
            jittered.diagonal().array() += bump;
            llt_.compute(jittered);
            if (llt_.info() == Eigen::Success && diagonal_ok()) {
                jitter_ = bump;
                return;
            }
        }
        Eigen::LDLT<MatrixXd> ldlt(a);
        std::ostringstream msg;
        msg << "Cholesky factorization of " << what << " failed (smallest pivot "
            << ldlt.vectorD().minCoeff() << ")";
        throw NumericalError(msg.str());
    }

    Eigen::Index size() const { return llt_.rows(); }

    /// Diagonal jitter that was needed (0 when the first attempt succeeded).
    double jitter() const { return jitter_; }

    auto lower() const { return llt_.matrixL(); }

    double log_det() const {
        return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    }

    template <typename Rhs>
    auto solve(const Eigen::MatrixBase<Rhs>& b) const {
        return llt_.solve(b);
    }

    /// L^{-1} as a dense lower-triangular matrix.
    MatrixXd inverse_lower() const {
        MatrixXd inv = MatrixXd::Identity(size(), size());
        llt_.matrixL().solveInPlace(inv);
        return inv;
    }

    MatrixXd inverse() const {
        const MatrixXd linv = inverse_lower();
        MatrixXd out = MatrixXd::Zero(size(), size());
        out.selfadjointView<Eigen::Lower>().rankUpdate(linv.transpose());
        return out.selfadjointView<Eigen::Lower>();
    }

private:
    bool diagonal_ok() const {
        const auto d = llt_.matrixLLT().diagonal();
        return d.allFinite() && (d.array() > 0.0).all();
    }

    Eigen::LLT<MatrixXd> llt_;
    double jitter_ = 0.0;
};

/// Copies the lower triangle onto the upper triangle.
inline MatrixXd mirror_lower(const MatrixXd& a) {
    MatrixXd out = a.triangularView<Eigen::Lower>();
    out.triangularView<Eigen::StrictlyUpper>() = a.triangularView<Eigen::StrictlyLower>().transpose();
    return out;
}

inline bool is_symmetric(const MatrixXd& a, double tol = 1e-10) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

inline bool is_positive_definite(const MatrixXd& a) {
    if (a.rows() != a.cols() || !a.allFinite()) return false;
    Eigen::LLT<MatrixXd> llt(a);
    return llt.info() == Eigen::Success && (llt.matrixLLT().diagonal().array() > 0.0).all();
}

/// log of the multivariate gamma function Gamma_q(x).
inline double log_multivariate_gamma(int q, double x) {
    double out = 0.25 * q * (q - 1) * std::log(std::numbers::pi);
    for (int j = 1; j <= q; ++j) {
        out += std::lgamma(x + 0.5 * (1 - j));
    }
    return out;
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

} // namespace eblmm

#endif // EBLMM_LINALG_HPP
