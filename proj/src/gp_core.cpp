#include "gpmm/gp_core.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <numeric>
#include <sstream>

#include "gpmm/errors.hpp"
#include "gpmm/random.hpp"

namespace gpmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Log-parameters are kept inside this box so that a runaway step cannot
// produce inf/0 kernel entries.
constexpr double kLogClamp = 15.0;

bool all_finite(const Vector& v) { return v.allFinite(); }

// Weighted squared distances sum_j w_j (a_j - b_j)^2 for every row pair.
Matrix scaled_sqdist(const Eigen::Ref<const RowMatrix>& a, const Eigen::Ref<const RowMatrix>& b,
                     const Vector& inv_ls)
{
    Matrix d = Matrix::Zero(a.rows(), b.rows());
    for (Eigen::Index j = 0; j < inv_ls.size(); ++j) {
        for (Eigen::Index c = 0; c < b.rows(); ++c) {
            const double bj = b(c, j);
            d.col(c).array() += inv_ls(j) * (a.col(j).array() - bj).square();
        }
    }
    return d;
}

Vector inv_lengthscales(const KernelParams& params, int dim)
{
    return params.logs().row(dim).segment(1, params.input_dim()).array().exp().transpose();
}

// K + (sigma^2) I for one output dimension, without jitter.
Matrix train_matrix(const Matrix& kf, double noise_var)
{
    Matrix k = kf;
    k.diagonal().array() += noise_var;
    return k;
}

Matrix solve_lower(const Matrix& l, const Matrix& b)
{
    return l.triangularView<Eigen::Lower>().solve(b);
}

struct DimFactor {
    Matrix kf;
    Matrix chol;
    Vector alpha;
};

DimFactor factor_dim(const Dataset& data, const KernelParams& params, int dim)
{
    DimFactor f;
    auto x = data.inputs();
    f.kf = kernel_matrix(params, dim, x, x);
    const double noise = params.noise_std(dim);
    f.chol = jittered_cholesky(train_matrix(f.kf, noise * noise));
    const Vector y = data.targets().col(dim);
    f.alpha = f.chol.triangularView<Eigen::Lower>().solve(y);
    f.chol.triangularView<Eigen::Lower>().transpose().solveInPlace(f.alpha);
    return f;
}

double log_det_from_chol(const Matrix& l)
{
    return 2.0 * l.diagonal().array().log().sum();
}

void check_dims(const Dataset& data, const KernelParams& params)
{
    require(data.input_dim() == params.input_dim() && data.output_dim() == params.output_dim(),
            "dataset and kernel params have mismatched dimensions");
}

} // namespace

std::uint64_t next_stamp()
{
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

// ---------------------------------------------------------------- KernelParams

KernelParams::KernelParams(int output_dim, int input_dim, double output_scale,
                           double inv_lengthscale, double noise_std)
{
    require(output_dim >= 1 && input_dim >= 1, "kernel params need positive dimensions");
    require(output_scale > 0 && inv_lengthscale > 0 && noise_std > 0,
            "kernel params must be strictly positive");
    Matrix logs(output_dim, input_dim + 2);
    logs.col(0).setConstant(std::log(output_scale));
    logs.middleCols(1, input_dim).setConstant(std::log(inv_lengthscale));
    logs.col(input_dim + 1).setConstant(std::log(noise_std));
    logs_ = std::move(logs);
    stamp_ = next_stamp();
}

KernelParams KernelParams::from_logs(Matrix logs)
{
    require(logs.rows() >= 1 && logs.cols() >= 3, "kernel params need positive dimensions");
    require(logs.allFinite(), "kernel params must be finite");
    KernelParams p;
    p.logs_ = std::move(logs);
    p.stamp_ = next_stamp();
    return p;
}

void KernelParams::set_logs(const Matrix& logs)
{
    require(logs.rows() == logs_.rows() && logs.cols() == logs_.cols(),
            "kernel params shape cannot change");
    require(logs.allFinite(), "kernel params must be finite");
    logs_ = logs;
    stamp_ = next_stamp();
}

// --------------------------------------------------------------------- Dataset

Dataset::Dataset(int input_dim, int output_dim)
    : input_dim_(input_dim), output_dim_(output_dim), stamp_(next_stamp())
{
    require(input_dim >= 1 && output_dim >= 1, "dataset needs positive dimensions");
}

void Dataset::append(const Vector& input, const Vector& target)
{
    require(input.size() == input_dim_ && target.size() == output_dim_,
            "dataset row has wrong dimension");
    require(all_finite(input) && all_finite(target), "dataset rows must be finite");
    inputs_.insert(inputs_.end(), input.data(), input.data() + input.size());
    targets_.insert(targets_.end(), target.data(), target.data() + target.size());
    ++rows_;
    stamp_ = next_stamp();
}

void Dataset::append(const Dataset& other)
{
    require(other.input_dim_ == input_dim_ && other.output_dim_ == output_dim_,
            "cannot concatenate datasets of different shape");
    inputs_.insert(inputs_.end(), other.inputs_.begin(), other.inputs_.end());
    targets_.insert(targets_.end(), other.targets_.begin(), other.targets_.end());
    rows_ += other.rows_;
    stamp_ = next_stamp();
}

void Dataset::set_row(int row, const Vector& input, const Vector& target)
{
    require(row >= 0 && row < rows_, "row index out of range");
    require(input.size() == input_dim_ && target.size() == output_dim_,
            "dataset row has wrong dimension");
    require(all_finite(input) && all_finite(target), "dataset rows must be finite");
    std::copy(input.data(), input.data() + input_dim_,
              inputs_.begin() + static_cast<std::ptrdiff_t>(row) * input_dim_);
    std::copy(target.data(), target.data() + output_dim_,
              targets_.begin() + static_cast<std::ptrdiff_t>(row) * output_dim_);
    stamp_ = next_stamp();
}

Dataset Dataset::subset(std::span<const int> rows) const
{
    Dataset out(input_dim_, output_dim_);
    out.inputs_.reserve(rows.size() * static_cast<std::size_t>(input_dim_));
    out.targets_.reserve(rows.size() * static_cast<std::size_t>(output_dim_));
    for (int r : rows) {
        require(r >= 0 && r < rows_, "subset row index out of range");
        auto xi = inputs_.begin() + static_cast<std::ptrdiff_t>(r) * input_dim_;
        auto yi = targets_.begin() + static_cast<std::ptrdiff_t>(r) * output_dim_;
        out.inputs_.insert(out.inputs_.end(), xi, xi + input_dim_);
        out.targets_.insert(out.targets_.end(), yi, yi + output_dim_);
    }
    out.rows_ = static_cast<int>(rows.size());
    return out;
}

// ---------------------------------------------------------------------- kernel

Matrix jittered_cholesky(const Matrix& k)
{
    const Eigen::Index n = k.rows();
    if (n == 0)
        return Matrix(0, 0);
    const double mean_diag = k.diagonal().mean();
    if (!std::isfinite(mean_diag) || mean_diag <= 0.0)
        throw NumericalDegeneracy("kernel matrix has a non-positive or non-finite diagonal");
    for (double rel = kJitterBase; rel <= kJitterMax * (1.0 + 1e-9); rel *= kJitterGrowth) {
        Matrix a = k;
        a.diagonal().array() += rel * mean_diag;
        Eigen::LLT<Matrix> llt(a);
        if (llt.info() != Eigen::Success)
            continue;
        Matrix l = llt.matrixL();
        if (l.diagonal().allFinite() && (l.diagonal().array() > 0.0).all())
            return l;
    }
    std::ostringstream msg;
    msg << "Cholesky failed on a " << n << "x" << n << " kernel matrix after jitter "
        << kJitterMax << " * mean(diag)";
    throw NumericalDegeneracy(msg.str());
}

double kernel_eval(const KernelParams& params, int dim, const Vector& a, const Vector& b)
{
    require(dim >= 0 && dim < params.output_dim(), "kernel output dimension out of range");
    require(a.size() == params.input_dim() && b.size() == params.input_dim(),
            "kernel input dimension mismatch");
    double s = 0.0;
    for (int j = 0; j < params.input_dim(); ++j) {
        const double d = a(j) - b(j);
        s += params.inv_lengthscale(dim, j) * d * d;
    }
    const double w = params.output_scale(dim);
    return w * w * std::exp(-0.5 * s);
}

Matrix kernel_matrix(const KernelParams& params, int dim, const Eigen::Ref<const RowMatrix>& a,
                     const Eigen::Ref<const RowMatrix>& b)
{
    require(a.cols() == params.input_dim() && b.cols() == params.input_dim(),
            "kernel input dimension mismatch");
    const double w = params.output_scale(dim);
    Matrix k = scaled_sqdist(a, b, inv_lengthscales(params, dim));
    k = (w * w) * (-0.5 * k.array()).exp().matrix();
    return k;
}

// ------------------------------------------------------------------- posterior

PosteriorCache build_posterior(const Dataset& data, const KernelParams& params)
{
    check_dims(data, params);
    PosteriorCache cache;
    cache.data_stamp = data.stamp();
    cache.params_stamp = params.stamp();
    cache.rows = data.rows();
    cache.dims.resize(static_cast<std::size_t>(params.output_dim()));
    for (int i = 0; i < params.output_dim(); ++i) {
        DimPosterior& d = cache.dims[static_cast<std::size_t>(i)];
        const double w = params.output_scale(i);
        const double s = params.noise_std(i);
        d.signal_var = w * w;
        d.noise_var = s * s;
        if (data.empty())
            continue;
        DimFactor f = factor_dim(data, params, i);
        d.chol = std::move(f.chol);
        d.alpha = std::move(f.alpha);
        const Vector sqrt_w = inv_lengthscales(params, i).array().sqrt();
        d.scaled = data.inputs() * sqrt_w.asDiagonal();
        d.scaled_sqnorm = d.scaled.rowwise().squaredNorm();
    }
    return cache;
}

GaussianPrediction predict_with(const PosteriorCache& cache, const Dataset& data,
                                const KernelParams& params, const Vector& query)
{
    require(query.size() == params.input_dim(), "query has wrong dimension");
    require(query.allFinite(), "query must be finite");
    const int c = params.output_dim();
    GaussianPrediction out;
    out.mean = Vector::Zero(c);
    out.variance = Vector::Zero(c);
    out.noise_variance = Vector::Zero(c);
    const int n = data.rows();
    auto x = data.inputs();
    for (int i = 0; i < c; ++i) {
        const DimPosterior& d = cache.dims[static_cast<std::size_t>(i)];
        out.noise_variance(i) = d.noise_var;
        if (n == 0) {
            out.variance(i) = d.signal_var;
            continue;
        }
        Vector kstar(n);
        for (int r = 0; r < n; ++r) {
            double s = 0.0;
            for (int j = 0; j < params.input_dim(); ++j) {
                const double diff = x(r, j) - query(j);
                s += params.inv_lengthscale(i, j) * diff * diff;
            }
            kstar(r) = d.signal_var * std::exp(-0.5 * s);
        }
        out.mean(i) = kstar.dot(d.alpha);
        const Vector v = d.chol.triangularView<Eigen::Lower>().solve(kstar);
        out.variance(i) = std::max(0.0, d.signal_var - v.squaredNorm());
    }
    return out;
}

GaussianPrediction posterior_predict(const Dataset& data, const KernelParams& params,
                                     PosteriorCache& cache, const Vector& query)
{
    if (!cache.valid_for(data, params))
        cache = build_posterior(data, params);
    return predict_with(cache, data, params, query);
}

// --------------------------------------------------------------------- GpModel

GpModel::GpModel(KernelParams params, Dataset data) : params_(std::move(params)), data_(std::move(data))
{
    check_dims(data_, params_);
}

GpModel::GpModel(const GpModel& other)
{
    std::lock_guard lock(other.mutex_);
    params_ = other.params_;
    data_ = other.data_;
    cache_ = other.cache_;
}

GpModel& GpModel::operator=(const GpModel& other)
{
    if (this == &other)
        return *this;
    std::scoped_lock lock(mutex_, other.mutex_);
    params_ = other.params_;
    data_ = other.data_;
    cache_ = other.cache_;
    return *this;
}

GpModel::GpModel(GpModel&& other) noexcept
    : params_(std::move(other.params_)), data_(std::move(other.data_)), cache_(std::move(other.cache_))
{
}

GpModel& GpModel::operator=(GpModel&& other) noexcept
{
    params_ = std::move(other.params_);
    data_ = std::move(other.data_);
    cache_ = std::move(other.cache_);
    return *this;
}

void GpModel::set_params(KernelParams params)
{
    require(params.input_dim() == params_.input_dim() && params.output_dim() == params_.output_dim(),
            "replacement params have different shape");
    params_ = std::move(params);
}

void GpModel::set_data(Dataset data)
{
    check_dims(data, params_);
    data_ = std::move(data);
}

void GpModel::append(const ExperienceTuple& point) { data_.append(point); }

std::shared_ptr<const PosteriorCache> GpModel::posterior() const
{
    std::lock_guard lock(mutex_);
    if (!cache_ || !cache_->valid_for(data_, params_))
        cache_ = std::make_shared<const PosteriorCache>(build_posterior(data_, params_));
    return cache_;
}

GaussianPrediction GpModel::predict(const Vector& query) const
{
    auto cache = posterior();
    return predict_with(*cache, data_, params_, query);
}

Matrix GpModel::predict_mean_batch(const Eigen::Ref<const RowMatrix>& queries) const
{
    require(queries.cols() == params_.input_dim(), "queries have wrong dimension");
    const int c = params_.output_dim();
    Matrix out = Matrix::Zero(queries.rows(), c);
    if (data_.empty())
        return out;
    auto cache = posterior();
    for (int i = 0; i < c; ++i) {
        const DimPosterior& d = cache->dims[static_cast<std::size_t>(i)];
        const Vector sqrt_w = inv_lengthscales(params_, i).array().sqrt();
        const RowMatrix qs = queries * sqrt_w.asDiagonal();
        Matrix dist = -2.0 * (qs * d.scaled.transpose());
        dist.colwise() += qs.rowwise().squaredNorm();
        dist.rowwise() += d.scaled_sqnorm.transpose();
        const Matrix k = d.signal_var * (-0.5 * dist.array().max(0.0)).exp();
        out.col(i) = k * d.alpha;
    }
    return out;
}

// ----------------------------------------------------------------- likelihoods

double data_log_likelihood(const GpModel& model, const ExperienceTuple& point)
{
    require(point.target.size() == model.output_dim(), "target has wrong dimension");
    require(point.target.allFinite(), "target must be finite");
    const GaussianPrediction p = model.predict(point.input);
    const Vector var = p.observed_variance();
    double ll = 0.0;
    for (Eigen::Index i = 0; i < var.size(); ++i) {
        const double r = point.target(i) - p.mean(i);
        ll += -0.5 * (kLog2Pi + std::log(var(i)) + r * r / var(i));
    }
    return ll;
}

double data_log_likelihood(const Dataset& data, const KernelParams& params,
                           const ExperienceTuple& point)
{
    return data_log_likelihood(GpModel(params, data), point);
}

double log_marginal_likelihood(const Dataset& data, const KernelParams& params)
{
    check_dims(data, params);
    require(data.rows() >= 1, "log marginal likelihood needs at least one row");
    const int n = data.rows();
    double total = 0.0;
    for (int i = 0; i < params.output_dim(); ++i) {
        const DimFactor f = factor_dim(data, params, i);
        const Vector y = data.targets().col(i);
        total += -0.5 * y.dot(f.alpha) - 0.5 * log_det_from_chol(f.chol) - 0.5 * n * kLog2Pi;
    }
    return total;
}

LmlWithGradient log_marginal_likelihood_gradient(const Dataset& data, const KernelParams& params)
{
    check_dims(data, params);
    require(data.rows() >= 1, "log marginal likelihood needs at least one row");
    const int n = data.rows();
    const int dx = params.input_dim();
    auto x = data.inputs();
    LmlWithGradient out;
    out.gradient = Matrix::Zero(params.output_dim(), params.params_per_dim());
    for (int i = 0; i < params.output_dim(); ++i) {
        const DimFactor f = factor_dim(data, params, i);
        const Vector y = data.targets().col(i);
        out.value += -0.5 * y.dot(f.alpha) - 0.5 * log_det_from_chol(f.chol) - 0.5 * n * kLog2Pi;

        // dL/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta)
        Matrix kinv = Matrix::Identity(n, n);
        f.chol.triangularView<Eigen::Lower>().solveInPlace(kinv);
        f.chol.triangularView<Eigen::Lower>().transpose().solveInPlace(kinv);
        Matrix w = f.alpha * f.alpha.transpose() - kinv;

        const Matrix m = w.cwiseProduct(f.kf);
        out.gradient(i, 0) = m.sum(); // dK/dlog w_i = 2 K_f
        const Vector row_sums = m.rowwise().sum();
        for (int j = 0; j < dx; ++j) {
            // sum_ab M_ab (x_aj - x_bj)^2 with M symmetric
            const Vector xj = x.col(j);
            const double quad = 2.0 * xj.cwiseAbs2().dot(row_sums) - 2.0 * xj.dot(m * xj);
            out.gradient(i, 1 + j) = -0.25 * params.inv_lengthscale(i, j) * quad;
        }
        const double s2 = params.noise_std(i) * params.noise_std(i);
        out.gradient(i, dx + 1) = s2 * w.trace();
    }
    return out;
}

HyperUpdateResult hyperparam_update(const Dataset& data, const KernelParams& params,
                                    const HyperUpdateOptions& options)
{
    check_dims(data, params);
    require(options.steps >= 0, "hyperparameter update needs steps >= 0");
    require(options.lr > 0.0, "hyperparameter update needs lr > 0");
    require(data.rows() >= 1, "hyperparameter update needs at least one row");
    require(options.min_noise_std >= 0.0, "min_noise_std must be >= 0");

    HyperUpdateResult result;
    result.params = params;
    if (options.steps == 0)
        return result;

    const int n = data.rows();
    const bool stochastic = options.batch_size > 0 && options.batch_size < n;
    const double before = log_marginal_likelihood(data, params);
    result.lml_before = before;
    result.lml_after = before;

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    const double noise_floor = options.min_noise_std > 0.0 ? std::log(options.min_noise_std) : 0.0;
    double lr = options.lr;
    for (int attempt = 0; attempt <= options.max_halvings; ++attempt) {
        Rng rng(derive_seed(options.seed, seed_stream::hyper, static_cast<std::uint64_t>(attempt)));
        Matrix logs = params.logs();
        Matrix m1 = Matrix::Zero(logs.rows(), logs.cols());
        Matrix m2 = Matrix::Zero(logs.rows(), logs.cols());
        const double b1 = 0.9;
        const double b2 = 0.999;
        bool finite = true;
        for (int step = 1; step <= options.steps; ++step) {
            const KernelParams current = KernelParams::from_logs(logs);
            LmlWithGradient g;
            if (stochastic) {
                for (int k = 0; k < options.batch_size; ++k) {
                    std::uniform_int_distribution<int> pick(k, n - 1);
                    std::swap(order[static_cast<std::size_t>(k)],
                              order[static_cast<std::size_t>(pick(rng))]);
                }
                std::vector<int> batch(order.begin(), order.begin() + options.batch_size);
                std::sort(batch.begin(), batch.end());
                g = log_marginal_likelihood_gradient(data.subset(batch), current);
            } else {
                g = log_marginal_likelihood_gradient(data, current);
            }
            if (!g.gradient.allFinite() || !std::isfinite(g.value)) {
                finite = false;
                break;
            }
            m1 = b1 * m1 + (1.0 - b1) * g.gradient;
            m2 = b2 * m2 + (1.0 - b2) * g.gradient.cwiseAbs2();
            const double c1 = 1.0 - std::pow(b1, step);
            const double c2 = 1.0 - std::pow(b2, step);
            logs.array() += lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + 1e-8);
            logs = logs.cwiseMax(-kLogClamp).cwiseMin(kLogClamp);
            if (options.min_noise_std > 0.0)
                logs.col(logs.cols() - 1) = logs.col(logs.cols() - 1).cwiseMax(noise_floor);
        }
        if (!finite) {
            result.params = params;
            result.status = HyperUpdateStatus::non_finite;
            return result;
        }
        KernelParams candidate = KernelParams::from_logs(logs);
        double after = -std::numeric_limits<double>::infinity();
        try {
            after = log_marginal_likelihood(data, candidate);
        } catch (const NumericalDegeneracy&) {
        }
        if (std::isfinite(after) && after >= before) {
            result.params = std::move(candidate);
            result.lml_after = after;
            result.halvings = attempt;
            result.status = HyperUpdateStatus::improved;
            return result;
        }
        lr *= 0.5;
    }
    result.params = params;
    result.halvings = options.max_halvings;
    result.status = HyperUpdateStatus::rejected;
    return result;
}

// ----------------------------------------------------------------- sparse bound

namespace {

// Plain Cholesky; the jitter schedule only runs when it fails.
Matrix plain_or_jittered_cholesky(const Matrix& k)
{
    Eigen::LLT<Matrix> llt(k);
    if (llt.info() == Eigen::Success) {
        Matrix l = llt.matrixL();
        if (l.diagonal().allFinite() && (l.diagonal().array() > 0.0).all())
            return l;
    }
    return jittered_cholesky(k);
}

} // namespace

double titsias_bound(const Dataset& data, std::span<const int> inducing, const KernelParams& params)
{
    check_dims(data, params);
    require(!inducing.empty(), "inducing set must be nonempty");
    const int n = data.rows();
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int r : inducing) {
        require(r >= 0 && r < n, "inducing index out of range");
        require(!seen[static_cast<std::size_t>(r)], "inducing indices must be distinct");
        seen[static_cast<std::size_t>(r)] = 1;
    }
    const Dataset z = data.subset(inducing);
    auto x = data.inputs();
    auto zx = z.inputs();

    double total = 0.0;
    for (int i = 0; i < params.output_dim(); ++i) {
        const double w2 = params.output_scale(i) * params.output_scale(i);
        const double s2 = params.noise_std(i) * params.noise_std(i);
        const Matrix lm = plain_or_jittered_cholesky(kernel_matrix(params, i, zx, zx));
        // A = Lm^-1 K_mn / sigma, so Q = sigma^2 A^T A
        Matrix a = solve_lower(lm, kernel_matrix(params, i, zx, x)) / std::sqrt(s2);
        Matrix b = a * a.transpose();
        b.diagonal().array() += 1.0;
        const Matrix lb = plain_or_jittered_cholesky(b);
        const Vector y = data.targets().col(i);
        const Vector c = solve_lower(lb, a * y);
        const double quad = (y.squaredNorm() - c.squaredNorm()) / s2;
        const double log_det = n * std::log(s2) + log_det_from_chol(lb);
        const double trace_q = s2 * a.squaredNorm();
        const double trace_k = n * w2;
        total += -0.5 * (n * kLog2Pi + log_det + quad) - (trace_k - trace_q) / (2.0 * s2);
    }
    return total;
}

} // namespace gpmm
