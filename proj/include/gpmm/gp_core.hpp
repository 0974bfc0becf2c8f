#pragma once

// Exact multi-output GP regression with one independent SE-ARD kernel per
// output dimension:
//
//   k_i(a, b) = w_i^2 exp(-1/2 sum_j w_ij (a_j - b_j)^2)
//
// plus the data likelihoods the mixture needs, analytic hyperparameter
// gradients and the variational inducing-point lower bound.

#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace gpmm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fresh, process-unique stamp. Mutating a Dataset or KernelParams assigns a
/// new one; copies share the stamp of their source.
std::uint64_t next_stamp();

/// Jitter schedule applied to kernel matrices before factorization:
/// start at kJitterBase * mean(diag), grow by kJitterGrowth until kJitterMax.
inline constexpr double kJitterBase = 1e-8;
inline constexpr double kJitterMax = 1e-4;
inline constexpr double kJitterGrowth = 10.0;

/// SE-ARD hyperparameters for every output dimension, stored as logs.
///
/// Row i of logs() is [log w_i, log w_i1, ..., log w_iD, log sigma_i] where
/// w_i is the output scale, w_ij the inverse squared lengthscales and
/// sigma_i the observation noise standard deviation.
class KernelParams {
public:
    KernelParams() = default;
    KernelParams(int output_dim, int input_dim, double output_scale, double inv_lengthscale,
                 double noise_std);

    static KernelParams from_logs(Matrix logs);

    int output_dim() const { return static_cast<int>(logs_.rows()); }
    int input_dim() const { return static_cast<int>(logs_.cols()) - 2; }
    int params_per_dim() const { return static_cast<int>(logs_.cols()); }

    double output_scale(int i) const { return std::exp(logs_(i, 0)); }
    double inv_lengthscale(int i, int j) const { return std::exp(logs_(i, 1 + j)); }
    double noise_std(int i) const { return std::exp(logs_(i, logs_.cols() - 1)); }

    const Matrix& logs() const { return logs_; }
    void set_logs(const Matrix& logs);

    std::uint64_t stamp() const { return stamp_; }

private:
    Matrix logs_;
    std::uint64_t stamp_ = 0;
};

/// One streamed observation: augmented input (state, action) and target
/// (state increment).
struct ExperienceTuple {
    Vector input;
    Vector target;
};

/// Growable row store of (input, target) pairs.
class Dataset {
public:
    Dataset() = default;
    Dataset(int input_dim, int output_dim);

    int rows() const { return rows_; }
    bool empty() const { return rows_ == 0; }
    int input_dim() const { return input_dim_; }
    int output_dim() const { return output_dim_; }

    /// Throws ContractViolation on dimension mismatch or non-finite entries.
    void append(const Vector& input, const Vector& target);
    void append(const ExperienceTuple& point) { append(point.input, point.target); }
    void append(const Dataset& other);
    /// Overwrites row `row` in place.
    void set_row(int row, const Vector& input, const Vector& target);

    Dataset subset(std::span<const int> rows) const;

    Eigen::Map<const RowMatrix> inputs() const
    {
        return {inputs_.data(), rows_, input_dim_};
    }
    Eigen::Map<const RowMatrix> targets() const
    {
        return {targets_.data(), rows_, output_dim_};
    }
    Vector input(int row) const { return inputs().row(row).transpose(); }
    Vector target(int row) const { return targets().row(row).transpose(); }

    std::uint64_t stamp() const { return stamp_; }

private:
    int input_dim_ = 0;
    int output_dim_ = 0;
    int rows_ = 0;
    std::vector<double> inputs_;
    std::vector<double> targets_;
    std::uint64_t stamp_ = 0;
};

/// Per-dimension Gaussian for a single query. `variance` is the latent f
/// variance; `noise_variance` holds sigma_i^2 so that observation densities
/// use variance + noise_variance.
struct GaussianPrediction {
    Vector mean;
    Vector variance;
    Vector noise_variance;

    Vector observed_variance() const { return variance + noise_variance; }
};

/// Factorized training system for one output dimension.
struct DimPosterior {
    Matrix chol;          // lower factor of K + sigma^2 I (+ jitter)
    Vector alpha;         // (K + sigma^2 I)^-1 y
    RowMatrix scaled;     // inputs scaled by sqrt(w_ij), for batched distances
    Vector scaled_sqnorm; // squared row norms of `scaled`
    double signal_var = 0.0;
    double noise_var = 0.0;
};

struct PosteriorCache {
    std::uint64_t data_stamp = 0;
    std::uint64_t params_stamp = 0;
    int rows = 0;
    std::vector<DimPosterior> dims;

    bool valid_for(const Dataset& data, const KernelParams& params) const
    {
        return data_stamp == data.stamp() && params_stamp == params.stamp() && !dims.empty();
    }
};

/// Lower Cholesky factor of `k` after the jitter schedule. Throws
/// NumericalDegeneracy once jitter exceeds kJitterMax * mean(diag).
Matrix jittered_cholesky(const Matrix& k);

double kernel_eval(const KernelParams& params, int dim, const Vector& a, const Vector& b);

/// Dense kernel matrix K_i(A, B) for output dimension `dim`.
Matrix kernel_matrix(const KernelParams& params, int dim, const Eigen::Ref<const RowMatrix>& a,
                     const Eigen::Ref<const RowMatrix>& b);

PosteriorCache build_posterior(const Dataset& data, const KernelParams& params);

/// Predictive distribution at `query`. Rebuilds `cache` when its stamp does
/// not match (data, params). With an empty dataset this is the prior.
GaussianPrediction posterior_predict(const Dataset& data, const KernelParams& params,
                                     PosteriorCache& cache, const Vector& query);

GaussianPrediction predict_with(const PosteriorCache& cache, const Dataset& data,
                                const KernelParams& params, const Vector& query);

/// A GP dynamics model: owned dataset, hyperparameters and a lazily rebuilt
/// posterior cache.
///
/// Single writer, many readers: const members may be called concurrently,
/// mutation must not overlap with reads.
class GpModel {
public:
    GpModel() = default;
    GpModel(KernelParams params, Dataset data);
    GpModel(const GpModel& other);
    GpModel& operator=(const GpModel& other);
    GpModel(GpModel&& other) noexcept;
    GpModel& operator=(GpModel&& other) noexcept;

    const Dataset& data() const { return data_; }
    const KernelParams& params() const { return params_; }
    int input_dim() const { return params_.input_dim(); }
    int output_dim() const { return params_.output_dim(); }

    void set_params(KernelParams params);
    void set_data(Dataset data);
    void append(const ExperienceTuple& point);

    std::shared_ptr<const PosteriorCache> posterior() const;

    GaussianPrediction predict(const Vector& query) const;

    /// Predictive means for every row of `queries` (rows x input_dim);
    /// returns rows x output_dim.
    Matrix predict_mean_batch(const Eigen::Ref<const RowMatrix>& queries) const;

private:
    KernelParams params_;
    Dataset data_;
    mutable std::mutex mutex_;
    mutable std::shared_ptr<const PosteriorCache> cache_;
};

/// sum_i log N(y_i; mean_i, var_i + sigma_i^2) under the predictive of the
/// model. With no data this is the likelihood under the prior.
double data_log_likelihood(const GpModel& model, const ExperienceTuple& point);
double data_log_likelihood(const Dataset& data, const KernelParams& params,
                           const ExperienceTuple& point);

/// sum_i log N(Y^i; 0, K_i + sigma_i^2 I). Requires at least one row.
double log_marginal_likelihood(const Dataset& data, const KernelParams& params);

struct LmlWithGradient {
    double value = 0.0;
    Matrix gradient; // same layout as KernelParams::logs()
};

/// Log marginal likelihood and its exact gradient with respect to the log
/// hyperparameters.
LmlWithGradient log_marginal_likelihood_gradient(const Dataset& data, const KernelParams& params);

struct HyperUpdateOptions {
    int steps = 10;
    double lr = 0.1;
    /// Rows per stochastic gradient step; 0 or >= rows means full batch.
    int batch_size = 0;
    std::uint64_t seed = 0;
    /// Step-size halvings allowed when the update lowers the full-data objective.
    int max_halvings = 3;
    /// Lower bound on every sigma_i, enforced after each step; 0 disables it.
    double min_noise_std = 0.0;
};

enum class HyperUpdateStatus { unchanged, improved, rejected, non_finite };

struct HyperUpdateResult {
    KernelParams params;
    double lml_before = 0.0;
    double lml_after = 0.0;
    int halvings = 0;
    HyperUpdateStatus status = HyperUpdateStatus::unchanged;
};

/// Gradient ascent (Adam moments) on the log marginal likelihood in log
/// parameter space. The returned params never lower the full-data log
/// marginal likelihood: a losing update is retried with half the step size
/// and finally rejected. A non-finite gradient aborts and returns the input.
HyperUpdateResult hyperparam_update(const Dataset& data, const KernelParams& params,
                                    const HyperUpdateOptions& options);

/// Variational lower bound of the log marginal likelihood with the rows in
/// `inducing` acting as inducing inputs:
///
///   sum_i log N(Y^i; 0, Q_i + sigma_i^2 I) - tr(K_i - Q_i) / (2 sigma_i^2),
///   Q_i = K_nm K_mm^-1 K_mn.
///
/// K_mm gets jitter only if its plain Cholesky factorization fails.
double titsias_bound(const Dataset& data, std::span<const int> inducing,
                     const KernelParams& params);

} // namespace gpmm
