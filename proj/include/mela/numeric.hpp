#pragma once

// Dense kernels: closed-form ridge regression, softmax cross-entropy,
// L2-regularised multinomial logistic regression and a finite-difference
// gradient checker. Objectives use a mean over samples so the
// regularisation constants do not depend on dataset size.

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace mela {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct RidgeConfig {
    double lambda1 = 1e-3;
    bool bias = false;  // append a constant-1 feature

    void validate() const;
};

struct LogRegConfig {
    double lambda2 = 1.0;
    int max_iter = 10000;
    double tol = 1e-6;  // stop when ||grad||_F < tol
    bool bias = false;

    void validate() const;
};

/// Rows of W are per-class weight vectors; scores are W z (+ b).
struct LinearClassifier {
    Matrix W;
    std::optional<Vector> bias;

    int num_classes() const { return static_cast<int>(W.rows()); }
    /// n x C scores for the rows of Z.
    Matrix scores(const Matrix& Z) const;
    std::vector<int> predict(const Matrix& Z) const;
};

// ---- losses ---------------------------------------------------------------

double log_sum_exp(const Eigen::Ref<const Vector>& v);

/// -log softmax(logits)[y], computed with max subtraction.
double softmax_ce(const Eigen::Ref<const Vector>& logits, int y);

/// Mean cross-entropy of the rows of `logits` against `labels`.
double mean_softmax_ce(const Matrix& logits, std::span<const int> labels);

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

Matrix one_hot(std::span<const int> labels, int num_classes);

// ---- ridge ----------------------------------------------------------------

/// Minimiser of mean ||W z_i - onehot(y_i)||^2 + lambda1 ||W||_F^2, i.e.
/// W^T = (Z^T Z + n lambda1 I)^{-1} Z^T Y, solved by Cholesky.
LinearClassifier ridge_fit(const Matrix& Z, std::span<const int> labels, int num_classes,
                           const RidgeConfig& cfg);

// ---- logistic regression ----------------------------------------------------

struct LogRegResult {
    LinearClassifier classifier;
    double objective = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective_trace;  // one entry per accepted iterate
};

/// Mean multinomial cross-entropy plus lambda2 ||W||_F^2 (bias included
/// in W when the constant feature is appended).
double logreg_objective(const Matrix& W, const Matrix& Z, std::span<const int> labels, double lambda2);

/// Monotone accelerated gradient descent with backtracking line search.
/// Never throws on non-convergence: `converged` is false and the best
/// iterate is returned.
LogRegResult logreg_fit(const Matrix& Z, std::span<const int> labels, int num_classes,
                        const LogRegConfig& cfg);

// ---- nearest centroid -------------------------------------------------------

/// Nearest-class-mean classifier written as a linear scorer:
/// score_k(z) = 2 mu_k . z - ||mu_k||^2.
LinearClassifier nearest_centroid_fit(const Matrix& Z, std::span<const int> labels, int num_classes);

// ---- gradient checking ------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    Eigen::Index worst_index = -1;
    Vector analytic;
    Vector numeric;
};

/// Central differences against an analytic gradient. The per-coordinate
/// error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<double(const Vector&)>& f,
                           const std::function<Vector(const Vector&)>& grad, const Vector& point,
                           double epsilon = 1e-5, double floor = 1e-6);

}  // namespace mela
