#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <numeric>
#include <random>

#include "eblmm/laplace.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace eblmm;
namespace ts = testing_support;

namespace {

double coordinate_error(const MatrixXd& exact, const MatrixXd& fd) { return ts::max_relative_error(exact, fd); }

} // namespace

TEST(ParamCoordinates, LayoutAndRoundTrip) {
    std::mt19937_64 rng(41);
    const Design d = validate_design(ts::random_design(rng, 12, 3, {{3, 2}, {2, 3}}));
    const ParamCoordinates c(d);
    EXPECT_EQ(c.size(), 3 + 3 + 6 + 1);
    EXPECT_EQ(c.sigma_offset(0), 3);
    EXPECT_EQ(c.sigma_offset(1), 6);
    EXPECT_EQ(c.sigma2_index(), 12);
    // Lower triangle, row-major: (0,0), (1,0), (1,1), (2,0), ...
    EXPECT_EQ(c.sigma_index(1, 1, 0), 7);
    EXPECT_EQ(c.sigma_index(1, 2, 0), 9);
    const ModelParams p = ts::random_params(rng, d);
    const VectorXd theta = c.flatten(p);
    EXPECT_EQ(theta[c.sigma_index(1, 2, 1)], p.sigmas[1](2, 1));
    const ModelParams back = c.unflatten(theta);
    EXPECT_EQ(back.beta, p.beta);
    EXPECT_EQ(back.sigmas[0], p.sigmas[0]);
    EXPECT_EQ(back.sigmas[1], p.sigmas[1]);
    EXPECT_EQ(back.sigma2, p.sigma2);
    EXPECT_EQ(c.flatten(back), theta);
}

TEST(HessianLogLikelihood, ScalarSigma2ByHand) {
    ModelDesign raw;
    raw.y = VectorXd::Constant(1, 2.0);
    raw.X = MatrixXd::Ones(1, 1);
    const Design d = validate_design(raw);
    const MatrixXd H = hessian_log_likelihood(d, {VectorXd::Zero(1), {}, 1.0});
    EXPECT_NEAR(H(1, 1), -3.5, 1e-14);
    EXPECT_NEAR(H(0, 0), -1.0, 1e-14);
}

TEST(HessianLogLikelihood, BetaBlockIsNegativeInformation) {
    std::mt19937_64 rng(42);
    for (int t = 0; t < 10; ++t) {
        const ModelDesign raw = ts::random_design(rng, 14, 3, {{4, 2}, {3, 1}});
        const Design d = validate_design(raw);
        const ModelParams p = ts::random_params(rng, d);
        const MatrixXd H = hessian_log_likelihood(d, p);
        const MatrixXd expected = -raw.X.transpose() * ts::dense_covariance(raw, p).inverse() * raw.X;
        EXPECT_LT(coordinate_error(H.topLeftCorner(3, 3), expected), 1e-10);
    }
}

TEST(HessianLogLikelihood, MatchesFiniteDifferences) {
    std::mt19937_64 rng(43);
    for (int t = 0; t < 10; ++t) {
        const int n = 8 + t % 8;
        const ModelDesign raw = ts::random_design(rng, n, 2, t % 2 ? std::vector<ts::EffectShape>{{3, 2}, {2, 1}}
                                                                   : std::vector<ts::EffectShape>{{4, 3}});
        const Design d = validate_design(raw);
        const ModelParams p = ts::random_params(rng, d);
        const ParamCoordinates c(d);
        ASSERT_LE(c.size(), 10);
        auto f = [&](const VectorXd& th) { return log_likelihood(d, c.unflatten(th)); };
        const MatrixXd fd = ts::fd_hessian(f, c.flatten(p), 1e-4);
        const MatrixXd H = hessian_log_likelihood(d, p);
        EXPECT_LT(coordinate_error(H, fd), 1e-5);
        EXPECT_EQ(H, H.transpose());
        const VectorXd g = gradient_log_likelihood(d, p);
        const VectorXd gfd = ts::fd_gradient(f, c.flatten(p), 1e-5);
        EXPECT_LT(ts::max_relative_error(g, gfd), 1e-7);
    }
}

TEST(HessianLogPrior, FlatPriorIsZero) {
    std::mt19937_64 rng(44);
    const Design d = validate_design(ts::random_design(rng, 10, 2, {{3, 2}}));
    const ModelParams p = ts::random_params(rng, d);
    const MatrixXd H = hessian_log_prior(p, PriorSpec::flat(d));
    EXPECT_EQ(H.cwiseAbs().maxCoeff(), 0.0);
}

TEST(HessianLogPrior, RidgeBlocksAtZeroBeta) {
    std::mt19937_64 rng(45);
    const Design d = validate_design(ts::random_design(rng, 10, 3, {{3, 2}}));
    ModelParams p = ts::random_params(rng, d);
    p.beta.setZero();
    PriorSpec prior = PriorSpec::flat(d);
    prior.lambda = 1.7;
    const MatrixXd H = hessian_log_prior(p, prior);
    const ParamCoordinates c(d);
    EXPECT_LT((H.topLeftCorner(3, 3) + (prior.lambda / p.sigma2) * MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(),
              1e-14);
    EXPECT_EQ(H.col(c.sigma2_index()).head(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(HessianLogPrior, MatchesFiniteDifferences) {
    std::mt19937_64 rng(46);
    for (int t = 0; t < 10; ++t) {
        const Design d = validate_design(ts::random_design(rng, 12, 2, {{6, 2}, {4, 1}}));
        const ModelParams p = ts::random_params(rng, d);
        PriorSpec prior = PriorSpec::uniform(d, ts::uniform(rng, 0.1, 3.0), 1.0, 0.0, ts::uniform(rng, 0.01, 1.0));
        for (auto& e : prior.effects) {
            e.strength = ts::uniform(rng, 0.4, 0.9);
            e.mode = ts::random_spd(rng, e.dim());
        }
        const ParamCoordinates c(d);
        auto f = [&](const VectorXd& th) { return log_prior(c.unflatten(th), prior); };
        const MatrixXd fd = ts::fd_hessian(f, c.flatten(p), 1e-4);
        const MatrixXd H = hessian_log_prior(p, prior);
        EXPECT_LT(coordinate_error(H, fd), 1e-5);
        EXPECT_EQ(H, H.transpose());
        EXPECT_LT(ts::max_relative_error(gradient_log_prior(p, prior), ts::fd_gradient(f, c.flatten(p), 1e-5)), 1e-7);
    }
}

TEST(HessianLogPosterior, MatchesFiniteDifferencesAt20Points) {
    std::mt19937_64 rng(47);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const Design d = validate_design(ts::random_design(rng, 15, 2, {{4, 2}, {3, 1}}));
        const ModelParams p = ts::random_params(rng, d);
        const PriorSpec prior = PriorSpec::uniform(d, 0.6, 1.1, 0.5, 0.2);
        const ParamCoordinates c(d);
        auto f = [&](const VectorXd& th) { return log_posterior_unnormalized(d, c.unflatten(th), prior); };
        worst = std::max(worst, coordinate_error(hessian_log_posterior(d, p, prior), ts::fd_hessian(f, c.flatten(p), 1e-4)));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Laplace, ExactOnConjugateBetaBlock) {
    std::mt19937_64 rng(48);
    for (int t = 0; t < 10; ++t) {
        const int n = 10 + t, p = 1 + t % 4;
        const ModelDesign raw = ts::random_design(rng, n, p, {});
        const Design d = validate_design(raw);
        PriorSpec prior = PriorSpec::flat(d);
        prior.lambda = ts::uniform(rng, 0.2, 4.0);
        const ParamCoordinates c(d);
        LaplaceOptions opt;
        opt.mask = c.beta_only();
        const LaplaceEstimate est = laplace_log_marginal(d, prior, {}, opt);
        const double exact =
            oracles::conjugate_log_marginal(raw.y, raw.X, prior.lambda, est.fit.params.sigma2);
        EXPECT_NEAR(est.log_marginal, exact, 1e-8);
    }
}

namespace {

struct VarianceToy {
    Design design;
    PriorSpec prior;
    LaplaceEstimate estimate;
    double quadrature = 0.0;
};

// Intercept-only model; only sigma^2 is integrated, beta held at its mode.
VarianceToy variance_toy(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    ModelDesign raw;
    raw.X = MatrixXd::Ones(n, 1);
    raw.y = VectorXd(n);
    for (int i = 0; i < n; ++i) raw.y[i] = 1.0 + std::sqrt(2.0) * ts::normal(rng);
    VarianceToy t{validate_design(raw), {}, {}, 0.0};
    t.prior = PriorSpec::flat(t.design);
    t.prior.alpha = 0.5;
    LaplaceOptions opt;
    opt.mask = ParamCoordinates(t.design).sigma2_only();
    t.estimate = laplace_log_marginal(t.design, t.prior, {}, opt);
    const ModelParams mode = t.estimate.fit.params;
    const double peak = log_posterior_unnormalized(t.design, mode, t.prior);
    auto integrand = [&](double s2) {
        if (s2 <= 0.0) return 0.0;
        ModelParams q = mode;
        q.sigma2 = s2;
        return std::exp(log_posterior_unnormalized(t.design, q, t.prior) - peak);
    };
    // Outside [s/20, 50 s] the kernel is below e^-20 of its peak for n >= 20.
    const double s = mode.sigma2;
    const double integral =
        boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, s / 20.0, 50.0 * s, 20, 1e-10);
    t.quadrature = peak + std::log(integral);
    return t;
}

} // namespace

TEST(Laplace, SingleVarianceAgreesWithQuadrature) {
    const VarianceToy t = variance_toy(500, 49);
    EXPECT_LT(std::abs(std::exp(t.estimate.log_marginal - t.quadrature) - 1.0), 0.005);
}

// The sigma^2 integrand is an inverse-gamma kernel with shape k = n/2 + alpha,
// for which the Laplace/exact ratio is known in closed form.
TEST(Laplace, SingleVarianceErrorMatchesInverseGammaAnalysis) {
    for (int n : {20, 100, 500}) {
        const VarianceToy t = variance_toy(n, 50 + n);
        const double k = n / 2.0 + t.prior.alpha;
        // Laplace of s^-(k+1) exp(-B/s): sqrt(2 pi) (k+1)^(k-1/2) e^-(k+1) B^-k; exact: Gamma(k) B^-k.
        const double log_ratio = 0.5 * std::log(2.0 * M_PI) + (k - 0.5) * std::log(k + 1.0) - (k + 1.0) - std::lgamma(k);
        EXPECT_NEAR(t.estimate.log_marginal - t.quadrature, log_ratio, 1e-8) << n;
    }
}

TEST(Laplace, InvariantUnderObservationPermutation) {
    std::mt19937_64 rng(50);
    const ModelDesign raw = ts::random_design(rng, 20, 2, {{5, 2}});
    std::vector<int> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ModelDesign other = raw;
    for (int i = 0; i < 20; ++i) {
        other.y[i] = raw.y[perm[i]];
        other.X.row(i) = raw.X.row(perm[i]);
        other.effects[0].group_of[i] = raw.effects[0].group_of[perm[i]];
        other.effects[0].U.row(i) = raw.effects[0].U.row(perm[i]);
    }
    const Design a = validate_design(raw), b = validate_design(other);
    const PriorSpec prior = PriorSpec::uniform(a, 0.5, 1.0, 0.6);
    EXPECT_NEAR(laplace_log_marginal(a, prior).log_marginal, laplace_log_marginal(b, prior).log_marginal, 1e-7);
}

TEST(Laplace, NegativeHessianAtModeIsPositiveDefinite) {
    std::mt19937_64 rng(51);
    for (int t = 0; t < 10; ++t) {
        ModelDesign raw = ts::random_design(rng, 40, 2, {{8, 2}});
        Design d = validate_design(raw);
        const ModelParams truth{VectorXd::Constant(2, 1.0), {MatrixXd::Identity(2, 2)}, 0.5};
        raw.y = ts::draw_response(rng, d, truth);
        d = validate_design(raw);
        const PriorSpec prior = PriorSpec::uniform(d, 0.2, 1.0, 0.5);
        const LaplaceEstimate est = laplace_log_marginal(d, prior);
        EXPECT_FALSE(est.fit.hessian_clipped);
        const MatrixXd H = hessian_log_posterior(d, est.fit.params, prior);
        EXPECT_GT(Eigen::SelfAdjointEigenSolver<MatrixXd>(-H).eigenvalues().minCoeff(), -1e-6);
        EXPECT_EQ(*est.fit.marginal_log_likelihood, est.log_marginal);
    }
}

TEST(Laplace, PolishedModeMatchesTightEm) {
    std::mt19937_64 rng(52);
    const Design d = validate_design(ts::random_design(rng, 30, 2, {{6, 2}, {3, 1}}));
    const PriorSpec prior = PriorSpec::uniform(d, 0.3, 1.0, 0.5);
    EmSettings tight;
    tight.tolerance = 1e-13;
    tight.max_iterations = 200000;
    LaplaceOptions raw_em;
    raw_em.polish = false;
    EmSettings loose;
    loose.tolerance = 1e-6;
    const double a = laplace_log_marginal(d, prior, tight, raw_em).log_marginal;
    const double b = laplace_log_marginal(d, prior, loose).log_marginal;
    EXPECT_NEAR(a, b, 1e-7);
}

TEST(Laplace, PinnedEffectsAreHeldFixed) {
    std::mt19937_64 rng(53);
    const Design d = validate_design(ts::random_design(rng, 20, 2, {{5, 2}}));
    PriorSpec prior = PriorSpec::uniform(d, 0.5, 0.8, 1.0);
    const LaplaceEstimate est = laplace_log_marginal(d, prior);
    EXPECT_EQ(est.fit.params.sigmas[0], mirror_lower(prior.effects[0].mode));
    // Same value as integrating over beta and sigma^2 only.
    const ParamCoordinates c(d);
    std::vector<bool> mask(c.size(), true);
    for (int k = 0; k < c.sigma_count(0); ++k) mask[c.sigma_offset(0) + k] = false;
    EXPECT_NEAR(laplace_at_mode(d, prior, est.fit.params, mask).first, est.log_marginal, 1e-9);
}

TEST(Laplace, BoundaryVarianceRaisesClippingFlag) {
    std::mt19937_64 rng(54);
    const Design d = validate_design(ts::random_design(rng, 10, 2, {}));
    ModelParams p{VectorXd::Zero(2), {}, 1e-11};
    EXPECT_TRUE(laplace_at_mode(d, PriorSpec::flat(d), p).second);
}
