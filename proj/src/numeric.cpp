#include "mela/numeric.hpp"

#include "mela/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mela {

namespace {

void check_labels(const Matrix& Z, std::span<const int> labels, int num_classes, const char* who) {
    if (Z.rows() < 1) throw ValidationError(std::string(who) + ": need at least one sample");
    if (static_cast<std::size_t>(Z.rows()) != labels.size())
        throw ValidationError(std::string(who) + ": sample/label count mismatch");
    if (num_classes < 1) throw ValidationError(std::string(who) + ": num_classes must be >= 1");
    for (int y : labels) {
        if (y < 0 || y >= num_classes)
            throw ValidationError(std::string(who) + ": label " + std::to_string(y) + " out of range");
    }
    if (!Z.allFinite()) throw ValidationError(std::string(who) + ": non-finite inputs");
}

Matrix with_bias_column(const Matrix& Z) {
    Matrix out(Z.rows(), Z.cols() + 1);
    out.leftCols(Z.cols()) = Z;
    out.col(Z.cols()).setOnes();
    return out;
}

LinearClassifier split_bias(const Matrix& W, bool bias) {
    LinearClassifier c;
    if (!bias) {
        c.W = W;
        return c;
    }
    c.W = W.leftCols(W.cols() - 1);
    c.bias = W.col(W.cols() - 1);
    return c;
}

// Gradient of logreg_objective with respect to W.
Matrix logreg_gradient(const Matrix& W, const Matrix& Z, const Matrix& Y, double lambda2) {
    const Matrix P = softmax_rows(Z * W.transpose());
    return (P - Y).transpose() * Z / static_cast<double>(Z.rows()) + 2.0 * lambda2 * W;
}

}  // namespace

void RidgeConfig::validate() const {
    if (!(lambda1 > 0.0) || !std::isfinite(lambda1)) throw ValidationError("ridge: lambda1 must be > 0");
}

void LogRegConfig::validate() const {
    if (!(lambda2 > 0.0) || !std::isfinite(lambda2)) throw ValidationError("logreg: lambda2 must be > 0");
    if (max_iter < 1) throw ValidationError("logreg: max_iter must be >= 1");
    if (!(tol > 0.0)) throw ValidationError("logreg: tol must be > 0");
}

Matrix LinearClassifier::scores(const Matrix& Z) const {
    Matrix S = Z * W.transpose();
    if (bias) S.rowwise() += bias->transpose();
    return S;
}

std::vector<int> LinearClassifier::predict(const Matrix& Z) const {
    const Matrix S = scores(Z);
    std::vector<int> out(static_cast<std::size_t>(S.rows()));
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
        Eigen::Index best = 0;
        S.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

double softmax_ce(const Eigen::Ref<const Vector>& logits, int y) {
    if (logits.size() < 2) throw ValidationError("softmax_ce: need at least two logits");
    if (y < 0 || y >= logits.size()) throw ValidationError("softmax_ce: class index out of range");
    return log_sum_exp(logits) - logits[y];
}

double mean_softmax_ce(const Matrix& logits, std::span<const int> labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty())
        throw ValidationError("mean_softmax_ce: shape mismatch");
    double total = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        total += softmax_ce(logits.row(i).transpose(), labels[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<double>(logits.rows());
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix P(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        P.row(i) = (logits.row(i).array() - m).exp();
        P.row(i) /= P.row(i).sum();
    }
    return P;
}

Matrix one_hot(std::span<const int> labels, int num_classes) {
    Matrix Y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) Y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    return Y;
}

LinearClassifier ridge_fit(const Matrix& Z, std::span<const int> labels, int num_classes,
                           const RidgeConfig& cfg) {
    cfg.validate();
    check_labels(Z, labels, num_classes, "ridge_fit");
    const Matrix X = cfg.bias ? with_bias_column(Z) : Z;
    const auto n = static_cast<double>(X.rows());

    Matrix A = X.transpose() * X;
    A.diagonal().array() += n * cfg.lambda1;
    const Matrix B = X.transpose() * one_hot(labels, num_classes);
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) throw NumericalError("ridge_fit: factorisation failed");
    const Matrix Wt = llt.solve(B);
    if (!Wt.allFinite()) throw NumericalError("ridge_fit: non-finite solution");
    return split_bias(Wt.transpose(), cfg.bias);
}

double logreg_objective(const Matrix& W, const Matrix& Z, std::span<const int> labels, double lambda2) {
    return mean_softmax_ce(Z * W.transpose(), labels) + lambda2 * W.squaredNorm();
}

LogRegResult logreg_fit(const Matrix& Z, std::span<const int> labels, int num_classes,
                        const LogRegConfig& cfg) {
    cfg.validate();
    check_labels(Z, labels, num_classes, "logreg_fit");
    if (num_classes < 2) throw ValidationError("logreg_fit: need at least two classes");
    const Matrix X = cfg.bias ? with_bias_column(Z) : Z;
    const Matrix Y = one_hot(labels, num_classes);

    // x: accepted iterate, y: extrapolated point.
    Matrix x = Matrix::Zero(num_classes, X.cols());
    Matrix y = x;
    double fx = logreg_objective(x, X, labels, cfg.lambda2);
    Matrix gx = logreg_gradient(x, X, Y, cfg.lambda2);
    double t = 1.0;
    double lipschitz = 1.0;
    bool y_is_x = true;

    LogRegResult result;
    result.objective_trace.push_back(fx);
    int iter = 0;
    for (; iter < cfg.max_iter && gx.norm() >= cfg.tol; ++iter) {
        const double fy = y_is_x ? fx : logreg_objective(y, X, labels, cfg.lambda2);
        const Matrix gy = logreg_gradient(y, X, Y, cfg.lambda2);
        const double gy2 = gy.squaredNorm();

        lipschitz = std::max(lipschitz * 0.5, 1e-12);
        Matrix candidate;
        double fc = 0.0;
        for (;;) {
            candidate = y - gy / lipschitz;
            fc = logreg_objective(candidate, X, labels, cfg.lambda2);
            if (fc <= fy - 0.5 * gy2 / lipschitz || lipschitz > 1e300) break;
            lipschitz *= 2.0;
        }

        if (fc > fx) {
            // Momentum overshot: restart from the accepted iterate.
            y = x;
            t = 1.0;
            y_is_x = true;
            continue;
        }
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double momentum = (t - 1.0) / t_next;
        y = candidate + momentum * (candidate - x);
        y_is_x = momentum == 0.0;
        x = std::move(candidate);
        t = t_next;
        fx = fc;
        gx = logreg_gradient(x, X, Y, cfg.lambda2);
        result.objective_trace.push_back(fx);
    }

    if (!x.allFinite()) throw NumericalError("logreg_fit: diverged");
    result.classifier = split_bias(x, cfg.bias);
    result.objective = fx;
    result.grad_norm = gx.norm();
    result.iterations = iter;
    result.converged = result.grad_norm < cfg.tol;
    return result;
}

LinearClassifier nearest_centroid_fit(const Matrix& Z, std::span<const int> labels, int num_classes) {
    check_labels(Z, labels, num_classes, "nearest_centroid_fit");
    Matrix means = Matrix::Zero(num_classes, Z.cols());
    Vector counts = Vector::Zero(num_classes);
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        means.row(y) += Z.row(i);
        counts[y] += 1.0;
    }
    LinearClassifier c;
    c.W.resize(num_classes, Z.cols());
    c.bias = Vector(num_classes);
    for (int k = 0; k < num_classes; ++k) {
        if (counts[k] == 0.0) {
            // Absent class can never win.
            c.W.row(k).setZero();
            (*c.bias)[k] = -std::numeric_limits<double>::infinity();
            continue;
        }
        const Vector mu = means.row(k).transpose() / counts[k];
        c.W.row(k) = 2.0 * mu.transpose();
        (*c.bias)[k] = -mu.squaredNorm();
    }
    return c;
}

GradCheckResult grad_check(const std::function<double(const Vector&)>& f,
                           const std::function<Vector(const Vector&)>& grad, const Vector& point,
                           double epsilon, double floor) {
    GradCheckResult r;
    r.analytic = grad(point);
    if (r.analytic.size() != point.size()) throw ValidationError("grad_check: gradient has wrong size");
    r.numeric.resize(point.size());
    Vector probe = point;
    for (Eigen::Index i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + epsilon;
        const double up = f(probe);
        probe[i] = point[i] - epsilon;
        const double down = f(probe);
        probe[i] = point[i];
        r.numeric[i] = (up - down) / (2.0 * epsilon);

        const double a = r.analytic[i];
        const double n = r.numeric[i];
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        if (err > r.max_rel_error || r.worst_index < 0) {
            r.max_rel_error = err;
            r.worst_index = i;
        }
    }
    return r;
}

}  // namespace mela
