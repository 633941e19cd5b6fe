#ifndef EBLMM_DESIGN_HPP
#define EBLMM_DESIGN_HPP

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <string>
#include <vector>

#include "eblmm/error.hpp"

namespace eblmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// One grouping factor with its random-effect covariates.
///
/// `group_of[i]` is the 0-based level of observation i, `levels` the declared
/// number of levels m_r and `U` the n x q_r covariate matrix.
struct RandomEffectSpec {
    std::string name;
    std::vector<int> group_of;
    MatrixXd U;
    int levels = 0;
};

/// Raw, unvalidated model inputs.
struct ModelDesign {
    VectorXd y;
    MatrixXd X;
    std::vector<RandomEffectSpec> effects;
};

/// A grouping factor after validation, with derived structures.
struct EffectDesign {
    std::string name;
    std::vector<int> group_of;
    MatrixXd U;
    int levels = 0;
    int dim = 0;
    std::vector<std::vector<int>> rows_by_level;
    /// Face-splitting product K_r . U_r, n x (levels * dim); column j*dim+k is
    /// covariate k of level j.
    SparseMatrix Z;
    /// Column offset of this effect in the stacked Z.
    int offset = 0;

    MatrixXd level_block(int level) const { return U(rows_by_level[level], Eigen::all); }
};

/// Validated design. Only obtainable through validate_design().
class Design {
public:
    Design() = default;

    const VectorXd& y() const { return y_; }
    const MatrixXd& X() const { return X_; }
    int n() const { return static_cast<int>(y_.size()); }
    int p() const { return static_cast<int>(X_.cols()); }
    int num_effects() const { return static_cast<int>(effects_.size()); }
    const EffectDesign& effect(int r) const { return effects_[r]; }
    const std::vector<EffectDesign>& effects() const { return effects_; }
    /// Total random-effect dimension sum_r m_r q_r.
    int latent_dim() const { return latent_dim_; }
    /// All effects stacked side by side, n x latent_dim().
    const SparseMatrix& Z() const { return Z_; }

    /// Same covariates and grouping with a different response.
    Design with_response(const VectorXd& y) const {
        if (y.size() != y_.size()) {
            throw ValidationError("response length " + std::to_string(y.size()) +
                                      " does not match design with n=" + std::to_string(n()),
                                  "y");
        }
        Design out = *this;
        out.y_ = y;
        return out;
    }

    ModelDesign raw() const {
        ModelDesign out{y_, X_, {}};
        for (const auto& e : effects_) {
            out.effects.push_back({e.name, e.group_of, e.U, e.levels});
        }
        return out;
    }

private:
    friend Design validate_design(ModelDesign design);

    VectorXd y_;
    MatrixXd X_;
    std::vector<EffectDesign> effects_;
    SparseMatrix Z_;
    int latent_dim_ = 0;
};

namespace detail {

inline SparseMatrix face_split(const std::vector<int>& group_of, const MatrixXd& U, int levels) {
    const int n = static_cast<int>(U.rows());
    const int q = static_cast<int>(U.cols());
    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(n) * q);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < q; ++k) {
            entries.emplace_back(i, group_of[i] * q + k, U(i, k));
        }
    }
    SparseMatrix Z(n, static_cast<Eigen::Index>(levels) * q);
    Z.setFromTriplets(entries.begin(), entries.end());
    return Z;
}

} // namespace detail

/// Checks every structural invariant and builds level maps and Z_r.
inline Design validate_design(ModelDesign design) {
    const Eigen::Index n = design.y.size();
    if (n < 1) {
        throw ValidationError("response y is empty", "y");
    }
    if (design.X.rows() != n) {
        throw ValidationError("dimension mismatch: X has " + std::to_string(design.X.rows()) +
                                  " rows but y has " + std::to_string(n) + " entries",
                              "X");
    }
    if (design.X.cols() < 1) {
        throw ValidationError("X must have at least one column", "X");
    }
    if (!design.y.allFinite()) {
        throw ValidationError("non-finite entries in y", "y");
    }
    if (!design.X.allFinite()) {
        throw ValidationError("non-finite entries in X", "X");
    }

    Design out;
    out.y_ = std::move(design.y);
    out.X_ = std::move(design.X);
    int offset = 0;
    for (std::size_t r = 0; r < design.effects.size(); ++r) {
        auto& spec = design.effects[r];
        const std::string label = spec.name.empty() ? "effect " + std::to_string(r) : spec.name;
        if (static_cast<Eigen::Index>(spec.group_of.size()) != n) {
            throw ValidationError("dimension mismatch: grouping of " + label + " has " +
                                      std::to_string(spec.group_of.size()) + " entries, expected " +
                                      std::to_string(n),
                                  label + ".group_of");
        }
        if (spec.U.rows() != n) {
            throw ValidationError("dimension mismatch: U of " + label + " has " +
                                      std::to_string(spec.U.rows()) + " rows, expected " +
                                      std::to_string(n),
                                  label + ".U");
        }
        if (spec.U.cols() < 1) {
            throw ValidationError("U of " + label + " must have at least one column", label + ".U");
        }
        if (!spec.U.allFinite()) {
            throw ValidationError("non-finite entries in U of " + label, label + ".U");
        }
        if (spec.levels < 1) {
            throw ValidationError(label + " must declare at least one level", label);
        }
        EffectDesign e;
        e.name = spec.name;
        e.levels = spec.levels;
        e.dim = static_cast<int>(spec.U.cols());
        e.rows_by_level.resize(spec.levels);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int g = spec.group_of[i];
            if (g < 0 || g >= spec.levels) {
                throw ValidationError(label + ": observation " + std::to_string(i) + " has level " +
                                          std::to_string(g) + " outside [0, " +
                                          std::to_string(spec.levels) + ")",
                                      label + ".group_of");
            }
            e.rows_by_level[g].push_back(static_cast<int>(i));
        }
        for (int j = 0; j < spec.levels; ++j) {
            if (e.rows_by_level[j].empty()) {
                throw ValidationError(label + ": empty level " + std::to_string(j), label);
            }
        }
        e.Z = detail::face_split(spec.group_of, spec.U, spec.levels);
        e.group_of = std::move(spec.group_of);
        e.U = std::move(spec.U);
        e.offset = offset;
        offset += e.levels * e.dim;
        out.effects_.push_back(std::move(e));
    }
    out.latent_dim_ = offset;

    std::vector<Eigen::Triplet<double>> entries;
    for (const auto& e : out.effects_) {
        for (int col = 0; col < e.Z.outerSize(); ++col) {
            for (SparseMatrix::InnerIterator it(e.Z, col); it; ++it) {
                entries.emplace_back(static_cast<int>(it.row()), e.offset + col, it.value());
            }
        }
    }
    out.Z_.resize(n, offset);
    out.Z_.setFromTriplets(entries.begin(), entries.end());
    return out;
}

} // namespace eblmm

#endif // EBLMM_DESIGN_HPP
