#include "gpmm/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "gpmm/errors.hpp"
#include "gpmm/random.hpp"

namespace gpmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t salt(long step, int id, int purpose)
{
    return (static_cast<std::uint64_t>(step) << 20) ^ (static_cast<std::uint64_t>(id) << 4) ^
           static_cast<std::uint64_t>(purpose);
}

} // namespace

std::string to_string(PriorMode mode)
{
    return mode == PriorMode::dp ? "dp" : "transition";
}

PriorMode prior_mode_from_string(const std::string& s)
{
    if (s == "dp")
        return PriorMode::dp;
    if (s == "transition")
        return PriorMode::transition;
    throw ContractViolation("unknown prior mode '" + s + "' (expected dp or transition)");
}

std::string to_string(EventKind kind)
{
    switch (kind) {
    case EventKind::spawn: return "spawn";
    case EventKind::merge: return "merge";
    case EventKind::burn_in_end: return "burn_in_end";
    case EventKind::prune: return "prune";
    case EventKind::distill: return "distill";
    case EventKind::cap_reached: return "cap_reached";
    case EventKind::likelihood_degenerate: return "likelihood_degenerate";
    case EventKind::hyper_rejected: return "hyper_rejected";
    case EventKind::hyper_non_finite: return "hyper_non_finite";
    case EventKind::global_refresh: return "global_refresh";
    case EventKind::global_refresh_failed: return "global_refresh_failed";
    case EventKind::planner_all_failed: return "planner_all_failed";
    }
    return "unknown";
}

void MixtureConfig::validate() const
{
    require(alpha > 0.0, "alpha must be > 0");
    require(beta >= 0.0, "beta must be >= 0");
    require(epsilon > 0.0, "epsilon must be > 0");
    require(n_merge >= 1, "n_merge must be >= 1");
    require(m >= 1 && m < n_distill, "need 1 <= m < n_distill");
    require(theta_init.output_scale > 0 && theta_init.inv_lengthscale > 0 &&
                theta_init.noise_std > 0,
            "theta_init entries must be positive");
    require(lr > 0.0, "lr must be > 0");
    require(steps_per_tick >= 0, "steps_per_tick must be >= 0");
    require(K_max >= 1, "K_max must be >= 1");
    require(hyper_batch >= 0 && global_batch >= 0, "batch sizes must be >= 0");
    require(global_refresh_every >= 1, "global_refresh_every must be >= 1");
    require(global_reservoir >= 1, "global_reservoir must be >= 1");
    require(global_steps >= 0, "global_steps must be >= 0");
    require(distill_trials >= 1, "distill_trials must be >= 1");
    require(min_noise_std >= 0.0, "min_noise_std must be >= 0");
}

// ------------------------------------------------------------- TransitionStats

long TransitionStats::count(int from, int to) const
{
    auto it = counts_.find({from, to});
    return it == counts_.end() ? 0 : it->second;
}

long TransitionStats::total() const
{
    long s = 0;
    for (const auto& [key, c] : counts_)
        s += c;
    return s;
}

long TransitionStats::row_total(int from) const
{
    long s = 0;
    for (const auto& [key, c] : counts_)
        if (key.first == from)
            s += c;
    return s;
}

void TransitionStats::record(int to)
{
    if (prev_)
        ++counts_[{*prev_, to}];
    prev_ = to;
}

void TransitionStats::fold(int from, int into)
{
    if (from == into)
        return;
    std::map<std::pair<int, int>, long> folded;
    for (const auto& [key, c] : counts_) {
        const int a = key.first == from ? into : key.first;
        const int b = key.second == from ? into : key.second;
        folded[{a, b}] += c;
    }
    counts_ = std::move(folded);
    if (prev_ && *prev_ == from)
        prev_ = into;
}

void TransitionStats::set_count(int from, int to, long value)
{
    require(value >= 0, "transition counts are nonnegative");
    if (value == 0)
        counts_.erase({from, to});
    else
        counts_[{from, to}] = value;
}

// -------------------------------------------------------------------- EventLog

void EventLog::emit(Event event)
{
    ++counts_[event.kind];
    if (events_.size() < kMaxKept)
        events_.push_back(std::move(event));
}

long EventLog::count(EventKind kind) const
{
    auto it = counts_.find(kind);
    return it == counts_.end() ? 0 : it->second;
}

// ------------------------------------------------------------ prior/posterior

Vector transition_prior(const TransitionStats& stats, std::span<const int> expert_ids,
                        const MixtureConfig& cfg)
{
    const auto k = static_cast<Eigen::Index>(expert_ids.size());
    Vector w = Vector::Zero(k + 1);
    if (!stats.prev()) {
        w(k) = 1.0;
        return w;
    }
    const int prev = *stats.prev();
    for (Eigen::Index i = 0; i < k; ++i) {
        const int id = expert_ids[static_cast<std::size_t>(i)];
        w(i) = static_cast<double>(stats.count(prev, id)) + (id == prev ? cfg.beta : 0.0);
    }
    w(k) = cfg.alpha;
    return w / w.sum();
}

Vector dp_prior(std::span<const long> cluster_sizes, double alpha)
{
    require(alpha > 0.0, "alpha must be > 0");
    const auto k = static_cast<Eigen::Index>(cluster_sizes.size());
    Vector w(k + 1);
    for (Eigen::Index i = 0; i < k; ++i)
        w(i) = static_cast<double>(cluster_sizes[static_cast<std::size_t>(i)]);
    w(k) = alpha;
    return w / w.sum();
}

Vector assignment_posterior(const Vector& prior, const Vector& loglikes)
{
    require(prior.size() == loglikes.size() && prior.size() >= 1,
            "prior and log-likelihoods must have equal nonzero length");
    Vector lp(prior.size());
    for (Eigen::Index i = 0; i < prior.size(); ++i) {
        require(prior(i) >= 0.0, "prior weights must be nonnegative");
        lp(i) = prior(i) > 0.0 ? std::log(prior(i)) + loglikes(i) : kNegInf;
    }
    const double mx = lp.maxCoeff();
    if (!std::isfinite(mx))
        throw ContractViolation("assignment posterior has no slot with positive mass");
    Vector p = (lp.array() - mx).exp();
    return p / p.sum();
}

double gaussian_kl(double mean_p, double var_p, double mean_q, double var_q)
{
    require(var_p > 0.0 && var_q > 0.0, "KL needs positive variances");
    const double d = mean_p - mean_q;
    return 0.5 * (std::log(var_q / var_p) + (var_p + d * d) / var_q - 1.0);
}

double merge_distance(const GpModel& newer, const GpModel& older)
{
    require(!newer.data().empty(), "merge distance needs data in the newer expert");
    require(newer.input_dim() == older.input_dim() && newer.output_dim() == older.output_dim(),
            "experts have different shapes");
    const Dataset& d = newer.data();
    double total = 0.0;
    for (int r = 0; r < d.rows(); ++r) {
        const Vector x = d.input(r);
        const GaussianPrediction p_old = older.predict(x);
        const GaussianPrediction p_new = newer.predict(x);
        const Vector v_old = p_old.observed_variance();
        const Vector v_new = p_new.observed_variance();
        for (int i = 0; i < newer.output_dim(); ++i)
            total += gaussian_kl(p_old.mean(i), v_old(i), p_new.mean(i), v_new(i));
    }
    return total;
}

// ---------------------------------------------------------------- MixtureState

MixtureState::MixtureState(MixtureConfig config, int input_dim, int output_dim)
    : config_(std::move(config)), input_dim_(input_dim), output_dim_(output_dim)
{
    config_.validate();
    require(input_dim >= 1 && output_dim >= 1, "mixture needs positive dimensions");
    global_.reservoir = Dataset(input_dim, output_dim);
    InitialKernel init = config_.theta_init;
    init.noise_std = std::max(init.noise_std, config_.min_noise_std);
    global_.params = init.expand(input_dim, output_dim);
}

MixtureState::MixtureState(MixtureSnapshot snapshot)
    : config_(std::move(snapshot.config)),
      input_dim_(snapshot.input_dim),
      output_dim_(snapshot.output_dim),
      step_(snapshot.step),
      next_id_(snapshot.next_id),
      experts_(std::move(snapshot.experts)),
      stats_(std::move(snapshot.stats)),
      global_(std::move(snapshot.global))
{
    config_.validate();
    require(input_dim_ >= 1 && output_dim_ >= 1, "mixture needs positive dimensions");
    for (std::size_t i = 0; i < experts_.size(); ++i) {
        require(experts_[i].id < next_id_, "expert id beyond next_id");
        require(i == 0 || experts_[i - 1].id < experts_[i].id, "experts must be sorted by id");
        require(experts_[i].model.input_dim() == input_dim_ &&
                    experts_[i].model.output_dim() == output_dim_,
                "expert shape does not match mixture");
    }
}

const Expert* MixtureState::find(int id) const
{
    auto it = std::lower_bound(experts_.begin(), experts_.end(), id,
                               [](const Expert& e, int v) { return e.id < v; });
    return it != experts_.end() && it->id == id ? &*it : nullptr;
}

const Expert& MixtureState::expert(int id) const
{
    const Expert* e = find(id);
    if (!e)
        throw ContractViolation("no live expert with id " + std::to_string(id));
    return *e;
}

Expert& MixtureState::mutable_expert(int id) { return const_cast<Expert&>(expert(id)); }

std::vector<int> MixtureState::expert_ids() const
{
    std::vector<int> ids;
    ids.reserve(experts_.size());
    for (const Expert& e : experts_)
        ids.push_back(e.id);
    return ids;
}

long MixtureState::total_points() const
{
    long s = 0;
    for (const Expert& e : experts_)
        s += e.count();
    return s;
}

KernelParams MixtureState::new_expert_params() const { return global_.params; }

Vector MixtureState::current_prior() const
{
    const std::vector<int> ids = expert_ids();
    if (config_.prior_mode == PriorMode::dp) {
        if (experts_.empty()) {
            Vector w(1);
            w(0) = 1.0;
            return w;
        }
        std::vector<long> sizes;
        for (const Expert& e : experts_)
            sizes.push_back(e.assigned_total);
        return dp_prior(sizes, config_.alpha);
    }
    return transition_prior(stats_, ids, config_);
}

int MixtureState::pick_slot(const Vector& log_post, int k_live) const
{
    const double best = log_post.maxCoeff();
    if (!std::isfinite(best))
        return k_live;
    // Ties: previous assignment first, then lowest id, then the new slot.
    if (stats_.prev()) {
        for (int k = 0; k < k_live; ++k)
            if (experts_[static_cast<std::size_t>(k)].id == *stats_.prev() && log_post(k) == best)
                return k;
    }
    for (int k = 0; k <= k_live; ++k)
        if (log_post(k) == best)
            return k;
    return k_live;
}

void MixtureState::update_hyperparams(Expert& e, std::uint64_t purpose_salt)
{
    if (config_.steps_per_tick == 0)
        return;
    HyperUpdateOptions opt;
    opt.steps = config_.steps_per_tick;
    opt.lr = config_.lr;
    opt.batch_size = config_.hyper_batch;
    opt.min_noise_std = config_.min_noise_std;
    opt.seed = derive_seed(config_.seed, seed_stream::hyper, purpose_salt);
    try {
        HyperUpdateResult r = hyperparam_update(e.model.data(), e.model.params(), opt);
        if (r.status == HyperUpdateStatus::improved)
            e.model.set_params(std::move(r.params));
        else if (r.status == HyperUpdateStatus::non_finite)
            events_.emit({EventKind::hyper_non_finite, step_, e.id, -1, "non-finite gradient"});
        else if (r.status == HyperUpdateStatus::rejected)
            events_.emit({EventKind::hyper_rejected, step_, e.id, -1, "update lowered the objective"});
    } catch (const NumericalDegeneracy& ex) {
        events_.emit({EventKind::hyper_non_finite, step_, e.id, -1, ex.what()});
    }
}

void MixtureState::add_to_reservoir(const ExperienceTuple& point)
{
    ++global_.seen;
    if (global_.reservoir.rows() < config_.global_reservoir) {
        global_.reservoir.append(point);
        return;
    }
    Rng rng(derive_seed(config_.seed, seed_stream::reservoir, static_cast<std::uint64_t>(global_.seen)));
    std::uniform_int_distribution<long> pick(0, global_.seen - 1);
    const long j = pick(rng);
    if (j < config_.global_reservoir)
        global_.reservoir.set_row(static_cast<int>(j), point.input, point.target);
}

void MixtureState::refresh_global_prior()
{
    global_.since_refresh = 0;
    if (global_.reservoir.empty() || config_.global_steps == 0)
        return;
    HyperUpdateOptions opt;
    opt.steps = config_.global_steps;
    opt.lr = config_.lr;
    opt.batch_size = config_.global_batch;
    opt.min_noise_std = config_.min_noise_std;
    opt.seed = derive_seed(config_.seed, seed_stream::hyper, salt(step_, -1, 7));
    try {
        HyperUpdateResult r = hyperparam_update(global_.reservoir, global_.params, opt);
        if (r.status == HyperUpdateStatus::improved)
            global_.params = std::move(r.params);
        ++global_.refreshes;
        events_.emit({EventKind::global_refresh, step_, -1, -1, ""});
    } catch (const NumericalDegeneracy& ex) {
        events_.emit({EventKind::global_refresh_failed, step_, -1, -1, ex.what()});
    }
}

void MixtureState::merge_experts(int from, int into)
{
    require(from != into, "cannot merge an expert into itself");
    const Expert& src = expert(from);
    Expert& dst = mutable_expert(into);
    Dataset merged = dst.model.data();
    merged.append(src.model.data());
    dst.model.set_data(std::move(merged));
    dst.assigned_total += src.assigned_total;
    stats_.fold(from, into);
    experts_.erase(std::find_if(experts_.begin(), experts_.end(),
                                [from](const Expert& e) { return e.id == from; }));
    update_hyperparams(mutable_expert(into), salt(step_, into, 2));
}

std::optional<int> MixtureState::end_burn_in_merge(int expert_id)
{
    Expert& e = mutable_expert(expert_id);
    if (!config_.merge_prune) {
        e.burn_in = false;
        return std::nullopt;
    }
    double best = kInf;
    int best_id = -1;
    for (const Expert& other : experts_) {
        if (other.id >= expert_id)
            continue;
        double d = kInf;
        try {
            d = merge_distance(e.model, other.model);
        } catch (const NumericalDegeneracy&) {
        }
        if (d < best) {
            best = d;
            best_id = other.id;
        }
    }
    if (best_id >= 0 && best <= config_.epsilon) {
        std::ostringstream msg;
        msg << "burn-in merge, distance " << best;
        events_.emit({EventKind::merge, step_, expert_id, best_id, msg.str()});
        merge_experts(expert_id, best_id);
        return best_id;
    }
    std::ostringstream msg;
    msg << "kept; closest " << best_id << " at distance " << best;
    events_.emit({EventKind::burn_in_end, step_, expert_id, best_id, msg.str()});
    e.burn_in = false;
    return std::nullopt;
}

std::optional<int> MixtureState::prune_check(int z_old, int z_new)
{
    (void)z_new;
    const Expert* e = find(z_old);
    if (!e || experts_.size() <= 1 || e->count() > config_.n_merge)
        return std::nullopt;
    double best = kInf;
    int best_id = -1;
    for (const Expert& other : experts_) {
        if (other.id == z_old)
            continue;
        double d = kInf;
        try {
            d = merge_distance(e->model, other.model);
        } catch (const NumericalDegeneracy&) {
        }
        if (best_id < 0 || d < best) {
            best = d;
            best_id = other.id;
        }
    }
    std::ostringstream msg;
    msg << "pruned with " << e->count() << " points, distance " << best;
    events_.emit({EventKind::prune, step_, z_old, best_id, msg.str()});
    merge_experts(z_old, best_id);
    return z_old;
}

bool MixtureState::distill_if_due(int expert_id)
{
    Expert& e = mutable_expert(expert_id);
    if (e.count() < config_.n_distill)
        return false;
    SelectOptions opt;
    opt.trials = config_.distill_trials;
    opt.max_swap_evaluations = config_.distill_max_swap_evaluations;
    try {
        InducingSelection sel = select_inducing(e.model.data(), e.model.params(), config_.m, opt,
                                                derive_seed(config_.seed, seed_stream::distill,
                                                            salt(step_, expert_id, 3)));
        sel.expert_id = expert_id;
        const int before = e.count();
        apply_distillation(e.model, sel);
        std::ostringstream msg;
        msg << before << " -> " << e.count() << " rows, bound " << sel.bound;
        events_.emit({EventKind::distill, step_, expert_id, -1, msg.str()});
        return true;
    } catch (const NumericalDegeneracy& ex) {
        events_.emit({EventKind::likelihood_degenerate, step_, expert_id, -1,
                      std::string("distillation skipped: ") + ex.what()});
        return false;
    }
}

int MixtureState::add_expert(GpModel model, bool burn_in)
{
    require(model.input_dim() == input_dim_ && model.output_dim() == output_dim_,
            "expert shape does not match mixture");
    Expert e;
    e.id = next_id_++;
    e.assigned_total = model.data().rows();
    e.model = std::move(model);
    e.burn_in = burn_in;
    experts_.push_back(std::move(e));
    return experts_.back().id;
}

ObserveResult MixtureState::observe(const ExperienceTuple& point)
{
    require(point.input.size() == input_dim_ && point.target.size() == output_dim_,
            "observation has wrong dimension");
    require(point.input.allFinite() && point.target.allFinite(), "observation must be finite");

    const int k_live = live_count();
    const Vector prior = current_prior();
    Vector loglikes(k_live + 1);
    for (int k = 0; k < k_live; ++k) {
        const Expert& e = experts_[static_cast<std::size_t>(k)];
        try {
            loglikes(k) = data_log_likelihood(e.model, point);
        } catch (const NumericalDegeneracy& ex) {
            loglikes(k) = kNegInf;
            events_.emit({EventKind::likelihood_degenerate, step_, e.id, -1, ex.what()});
        }
        if (std::isnan(loglikes(k)))
            loglikes(k) = kNegInf;
    }
    const KernelParams seed_params = new_expert_params();
    loglikes(k_live) = data_log_likelihood(GpModel(seed_params, Dataset(input_dim_, output_dim_)), point);

    ObserveResult result;
    Vector log_post(k_live + 1);
    for (int k = 0; k <= k_live; ++k)
        log_post(k) = prior(k) > 0.0 ? std::log(prior(k)) + loglikes(k) : kNegInf;
    {
        const double mx = log_post.maxCoeff();
        if (std::isfinite(mx)) {
            Vector p = (log_post.array() - mx).exp();
            result.posterior = p / p.sum();
        } else {
            result.posterior = prior;
        }
    }

    int slot = pick_slot(log_post, k_live);
    if (slot == k_live && k_live >= config_.K_max) {
        events_.emit({EventKind::cap_reached, step_, -1, -1, "new expert suppressed by K_max"});
        Vector existing = log_post.head(k_live);
        if (!std::isfinite(existing.maxCoeff()))
            existing = loglikes.head(k_live);
        Eigen::Index best = 0;
        existing.maxCoeff(&best);
        slot = static_cast<int>(best);
    }

    int z;
    if (slot == k_live) {
        Expert e;
        e.id = next_id_++;
        e.model = GpModel(seed_params, Dataset(input_dim_, output_dim_));
        e.burn_in = true;
        experts_.push_back(std::move(e));
        z = experts_.back().id;
        result.spawned = true;
        events_.emit({EventKind::spawn, step_, z, -1, ""});
    } else {
        z = experts_[static_cast<std::size_t>(slot)].id;
    }
    result.chosen = z;

    Expert& target = mutable_expert(z);
    target.model.append(point);
    ++target.assigned_total;
    update_hyperparams(target, salt(step_, z, 1));

    const std::optional<int> z_old = stats_.prev();
    stats_.record(z);

    if (config_.merge_prune) {
        if (expert(z).burn_in && expert(z).count() >= config_.n_merge) {
            if (auto into = end_burn_in_merge(z)) {
                result.merged_into = into;
                z = *into;
            }
        }
        if (z_old && *z_old != z && find(*z_old))
            result.pruned = prune_check(*z_old, z);
    }
    // Settle maturity for experts that crossed n_merge through merges.
    for (bool again = true; again;) {
        again = false;
        for (const Expert& e : experts_) {
            if (e.burn_in && e.count() >= config_.n_merge) {
                end_burn_in_merge(e.id);
                again = true;
                break;
            }
        }
    }
    if (!find(z) && stats_.prev())
        z = *stats_.prev();

    for (int id : expert_ids())
        if (distill_if_due(id))
            result.distilled.push_back(id);

    add_to_reservoir(point);
    if (++global_.since_refresh >= config_.global_refresh_every)
        refresh_global_prior();

    ++step_;
    result.assignment = z;
    return result;
}

MixtureSnapshot MixtureState::snapshot() const
{
    MixtureSnapshot s;
    s.config = config_;
    s.input_dim = input_dim_;
    s.output_dim = output_dim_;
    s.step = step_;
    s.next_id = next_id_;
    s.experts = experts_;
    s.stats = stats_;
    s.global = global_;
    return s;
}

} // namespace gpmm
