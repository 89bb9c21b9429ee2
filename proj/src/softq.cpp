#include "psqd/softq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace psqd {

namespace {

std::string format_state(const StateVec& s) {
    std::ostringstream out;
    out << "(";
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? ", " : "") << s[i];
    out << ")";
    return out.str();
}

int nearest_index(std::span<const ActionVec> set, const ActionVec& a) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < set.size(); ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double diff = set[k][i] - a[i];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

int roulette(std::span<const double> weights, double total, Rng& rng) {
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

} // namespace

void SoftQ::values(const StateVec& state, std::span<const ActionVec> actions,
                   std::span<double> out) const {
    for (std::size_t i = 0; i < actions.size(); ++i) out[i] = value(state, actions[i]);
}

void ProposalSampler::sample_batch(const StateVec& state, int n, Rng& rng,
                                   std::vector<ActionVec>& out) const {
    out.resize(n);
    for (int i = 0; i < n; ++i) out[i] = sample(state, rng);
}

void ProposalSampler::densities(const StateVec& state, std::span<const ActionVec> actions,
                                std::span<double> out) const {
    for (std::size_t i = 0; i < actions.size(); ++i) out[i] = density(state, actions[i]);
}

ActionSampleSet ActionSampleSet::exact(std::vector<ActionVec> actions) {
    ActionSampleSet set;
    set.actions = std::move(actions);
    set.densities.assign(set.actions.size(), 1.0);
    set.exact_discrete = true;
    return set;
}

double soft_value(const SoftQ& q, const StateVec& state, const ActionSampleSet& actions) {
    if (actions.actions.empty()) throw DomainError("soft_value: empty candidate set");
    std::vector<double> qs(actions.actions.size());
    q.values(state, actions.actions, qs);
    if (actions.exact_discrete) return log_sum_exp(qs);
    if (actions.densities.size() != actions.actions.size())
        throw DomainError("soft_value: densities/actions size mismatch");
    const double m = *std::max_element(qs.begin(), qs.end());
    if (!std::isfinite(m)) throw DomainError("soft_value: non-finite Q value");
    double acc = 0.0;
    for (std::size_t i = 0; i < qs.size(); ++i) {
        if (!(actions.densities[i] > 0.0))
            throw DomainError("soft_value: proposal densities must be positive");
        acc += std::exp(qs[i] - m) / actions.densities[i];
    }
    return m + std::log(acc / static_cast<double>(qs.size()));
}

std::vector<ActionVec> angular_action_bins(int n_bins) {
    if (n_bins < 2) throw DomainError("angular_action_bins: need at least 2 bins");
    std::vector<ActionVec> bins(n_bins);
    for (int k = 0; k < n_bins; ++k) {
        const double th = 2.0 * M_PI * k / n_bins;
        bins[k] = {std::cos(th), std::sin(th)};
    }
    return bins;
}

// --- proposals --------------------------------------------------------------

UniformSetProposal::UniformSetProposal(std::vector<ActionVec> set) : set_(std::move(set)) {
    if (set_.empty()) throw DomainError("UniformSetProposal: empty action set");
}

ActionVec UniformSetProposal::sample(const StateVec&, Rng& rng) const {
    return set_[rng.uniform_int(static_cast<int>(set_.size()))];
}

double UniformSetProposal::density(const StateVec&, const ActionVec&) const {
    return 1.0 / static_cast<double>(set_.size());
}

BoltzmannSetProposal::BoltzmannSetProposal(std::shared_ptr<const SoftQ> q,
                                           std::vector<ActionVec> set)
    : q_(std::move(q)), set_(std::move(set)) {
    if (!q_) throw DomainError("BoltzmannSetProposal: null Q");
    if (set_.empty()) throw DomainError("BoltzmannSetProposal: empty action set");
}

void BoltzmannSetProposal::masses(const StateVec& state, std::span<double> out) const {
    q_->values(state, set_, out);
    const double m = *std::max_element(out.begin(), out.end());
    double total = 0.0;
    for (auto& v : out) {
        v = std::exp(v - m);
        total += v;
    }
    if (!(total > 0.0) || !std::isfinite(total))
        throw RuntimeAbort("BoltzmannSetProposal: degenerate mass at state " + format_state(state));
    for (auto& v : out) v /= total;
}

ActionVec BoltzmannSetProposal::sample(const StateVec& state, Rng& rng) const {
    std::vector<double> w(set_.size());
    masses(state, w);
    return set_[roulette(w, 1.0, rng)];
}

double BoltzmannSetProposal::density(const StateVec& state, const ActionVec& action) const {
    std::vector<double> w(set_.size());
    masses(state, w);
    return w[nearest_index(set_, action)];
}

void BoltzmannSetProposal::sample_batch(const StateVec& state, int n, Rng& rng,
                                        std::vector<ActionVec>& out) const {
    std::vector<double> w(set_.size());
    masses(state, w);
    out.resize(n);
    for (int i = 0; i < n; ++i) out[i] = set_[roulette(w, 1.0, rng)];
}

void BoltzmannSetProposal::densities(const StateVec& state, std::span<const ActionVec> actions,
                                     std::span<double> out) const {
    std::vector<double> w(set_.size());
    masses(state, w);
    for (std::size_t i = 0; i < actions.size(); ++i) out[i] = w[nearest_index(set_, actions[i])];
}

UniformSphereProposal::UniformSphereProposal(int dim) : dim_(dim) {
    if (dim < 2) throw DomainError("UniformSphereProposal: dim must be >= 2");
    // Surface area of S^{d-1}: 2 pi^{d/2} / Gamma(d/2).
    const double log_area =
        std::log(2.0) + 0.5 * dim * std::log(M_PI) - std::lgamma(0.5 * dim);
    density_ = std::exp(-log_area);
}

ActionVec UniformSphereProposal::sample(const StateVec&, Rng& rng) const {
    return rng.unit_vector(dim_);
}

double UniformSphereProposal::density(const StateVec&, const ActionVec&) const {
    return density_;
}

MixtureProposal::MixtureProposal(std::vector<std::shared_ptr<const ProposalSampler>> components,
                                 std::vector<double> weights)
    : components_(std::move(components)), weights_(std::move(weights)) {
    if (components_.empty() || components_.size() != weights_.size())
        throw DomainError("MixtureProposal: components/weights mismatch");
    double total = 0.0;
    for (double w : weights_) {
        if (!(w > 0.0)) throw DomainError("MixtureProposal: weights must be positive");
        total += w;
    }
    for (auto& w : weights_) w /= total;
}

ActionVec MixtureProposal::sample(const StateVec& state, Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < components_.size(); ++i) {
        acc += weights_[i];
        if (u < acc || i + 1 == components_.size()) return components_[i]->sample(state, rng);
    }
    return components_.back()->sample(state, rng);
}

double MixtureProposal::density(const StateVec& state, const ActionVec& action) const {
    double d = 0.0;
    for (std::size_t i = 0; i < components_.size(); ++i)
        d += weights_[i] * components_[i]->density(state, action);
    return d;
}

void MixtureProposal::sample_batch(const StateVec& state, int n, Rng& rng,
                                   std::vector<ActionVec>& out) const {
    std::vector<int> counts(components_.size(), 0);
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t pick = components_.size() - 1;
        for (std::size_t c = 0; c < components_.size(); ++c) {
            acc += weights_[c];
            if (u < acc) {
                pick = c;
                break;
            }
        }
        ++counts[pick];
    }
    out.clear();
    out.reserve(n);
    std::vector<ActionVec> part;
    for (std::size_t c = 0; c < components_.size(); ++c) {
        if (counts[c] == 0) continue;
        components_[c]->sample_batch(state, counts[c], rng, part);
        out.insert(out.end(), part.begin(), part.end());
    }
}

void MixtureProposal::densities(const StateVec& state, std::span<const ActionVec> actions,
                                std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    std::vector<double> part(actions.size());
    for (std::size_t c = 0; c < components_.size(); ++c) {
        components_[c]->densities(state, actions, part);
        for (std::size_t i = 0; i < actions.size(); ++i) out[i] += weights_[c] * part[i];
    }
}

ActionVec boltzmann_sample(const SoftQ& q, const StateVec& state, const ProposalSampler& proposal,
                           Rng& rng, int n_candidates) {
    if (n_candidates < 1) throw DomainError("boltzmann_sample: need at least one candidate");
    std::vector<ActionVec> cand;
    proposal.sample_batch(state, n_candidates, rng, cand);
    std::vector<double> dens(n_candidates);
    proposal.densities(state, cand, dens);
    std::vector<double> qs(n_candidates);
    q.values(state, cand, qs);
    const double m = *std::max_element(qs.begin(), qs.end());
    if (!std::isfinite(m))
        throw RuntimeAbort("boltzmann_sample: non-finite Q at state " + format_state(state));
    std::vector<double> w(n_candidates);
    double total = 0.0;
    for (int i = 0; i < n_candidates; ++i) {
        if (!(dens[i] > 0.0))
            throw RuntimeAbort("boltzmann_sample: proposal density must be positive");
        w[i] = std::exp(qs[i] - m) / dens[i];
        total += w[i];
    }
    if (!(total > 0.0) || !std::isfinite(total))
        throw RuntimeAbort("boltzmann_sample: degenerate importance weights at state " +
                           format_state(state));
    return cand[roulette(w, total, rng)];
}

// --- policies ---------------------------------------------------------------

BoltzmannSetPolicy::BoltzmannSetPolicy(std::shared_ptr<const SoftQ> q, std::vector<ActionVec> set)
    : proposal_(std::move(q), std::move(set)) {}

ActionVec BoltzmannSetPolicy::act(const StateVec& state, Rng& rng) const {
    return proposal_.sample(state, rng);
}

UniformSetPolicy::UniformSetPolicy(std::vector<ActionVec> set) : set_(std::move(set)) {
    if (set_.empty()) throw DomainError("UniformSetPolicy: empty action set");
}

ActionVec UniformSetPolicy::act(const StateVec&, Rng& rng) const {
    return set_[rng.uniform_int(static_cast<int>(set_.size()))];
}

BoltzmannSampledPolicy::BoltzmannSampledPolicy(std::shared_ptr<const SoftQ> q,
                                               std::shared_ptr<const ProposalSampler> proposal,
                                               int n_candidates)
    : q_(std::move(q)), proposal_(std::move(proposal)), n_candidates_(n_candidates) {
    if (!q_ || !proposal_ || n_candidates_ < 1)
        throw DomainError("BoltzmannSampledPolicy: bad arguments");
}

ActionVec BoltzmannSampledPolicy::act(const StateVec& state, Rng& rng) const {
    return boltzmann_sample(*q_, state, *proposal_, rng, n_candidates_);
}

GreedySetPolicy::GreedySetPolicy(std::shared_ptr<const SoftQ> q, std::vector<ActionVec> set)
    : q_(std::move(q)), set_(std::move(set)) {
    if (!q_ || set_.empty()) throw DomainError("GreedySetPolicy: bad arguments");
}

ActionVec GreedySetPolicy::act(const StateVec& state, Rng&) const {
    std::vector<double> qs(set_.size());
    q_->values(state, set_, qs);
    const auto it = std::max_element(qs.begin(), qs.end());
    return set_[static_cast<std::size_t>(it - qs.begin())];
}

// --- tabular ----------------------------------------------------------------

TabularDyn TabularDyn::from(const Gridworld& env) {
    TabularDyn dyn;
    dyn.n_states = env.n_states();
    dyn.n_actions = Gridworld::n_actions();
    dyn.next.resize(static_cast<std::size_t>(dyn.n_states) * dyn.n_actions);
    for (int s = 0; s < dyn.n_states; ++s)
        for (int a = 0; a < dyn.n_actions; ++a)
            dyn.next[static_cast<std::size_t>(s) * dyn.n_actions + a] = env.next_index(s, a);
    return dyn;
}

TabularQ::TabularQ(int n_states, int n_actions, double gamma)
    : n_states_(n_states), n_actions_(n_actions), gamma_(gamma) {
    if (n_states < 1 || n_actions < 1) throw DomainError("TabularQ: bad dimensions");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("TabularQ: gamma must be in [0, 1)");
    table_.assign(static_cast<std::size_t>(n_states) * n_actions, 0.0);
    desc_.state_dim = 1;
    desc_.action_dim = 1;
    desc_.subtask_count = 1;
    desc_.action_kind = ActionKind::DiscreteSet;
    desc_.discrete_actions = n_actions;
    desc_.horizon = 1;
    desc_.bounds_lo = {0.0};
    desc_.bounds_hi = {static_cast<double>(n_states - 1)};
}

TabularQ::TabularQ(const Gridworld& env, double gamma)
    : TabularQ(env.n_states(), Gridworld::n_actions(), gamma) {
    bind_geometry(env);
}

void TabularQ::bind_geometry(const Gridworld& env) {
    if (env.n_states() != n_states_ || Gridworld::n_actions() != n_actions_)
        throw DomainError("TabularQ: gridworld shape does not match the table");
    desc_ = env.descriptor();
    grid_width_ = env.config().width;
}

std::span<const double> TabularQ::row(int s) const {
    return {table_.data() + static_cast<std::size_t>(s) * n_actions_,
            static_cast<std::size_t>(n_actions_)};
}

int TabularQ::state_index(const StateVec& state) const {
    if (grid_width_ > 0) {
        const int x = static_cast<int>(std::lround(state[0]));
        const int y = static_cast<int>(std::lround(state[1]));
        return y * grid_width_ + x;
    }
    if (state.size() == 1) return static_cast<int>(std::lround(state[0]));
    throw DomainError("TabularQ: no state mapping for this descriptor");
}

double TabularQ::value(const StateVec& state, const ActionVec& action) const {
    const int s = state_index(state);
    const int a = static_cast<int>(std::lround(action.at(0)));
    if (s < 0 || s >= n_states_ || a < 0 || a >= n_actions_)
        throw DomainError("TabularQ: index out of range");
    return at(s, a);
}

TabularQ soft_backup(const TabularQ& q, const TabularDyn& dyn, const RewardTable& reward,
                     const Mask& allowed) {
    if (q.n_states() != dyn.n_states || q.n_actions() != dyn.n_actions)
        throw DomainError("soft_backup: Q/dynamics shape mismatch");
    if (reward.size() != q.raw().size())
        throw DomainError("soft_backup: reward table shape mismatch");
    const bool masked = !allowed.empty();
    if (masked && allowed.size() != q.raw().size())
        throw DomainError("soft_backup: mask shape mismatch");

    const int A = dyn.n_actions;
    std::vector<double> v(dyn.n_states);
    for (int s = 0; s < dyn.n_states; ++s) {
        double m = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < A; ++a) {
            if (masked && !allowed[static_cast<std::size_t>(s) * A + a]) continue;
            m = std::max(m, q.at(s, a));
        }
        if (m == -std::numeric_limits<double>::infinity())
            throw InfeasibilityError("soft_backup: state " + std::to_string(s) +
                                         " has no allowed action",
                                     {static_cast<double>(s)});
        double acc = 0.0;
        for (int a = 0; a < A; ++a) {
            if (masked && !allowed[static_cast<std::size_t>(s) * A + a]) continue;
            acc += std::exp(q.at(s, a) - m);
        }
        v[s] = m + std::log(acc);
    }

    TabularQ out = q;
    const double gamma = q.gamma();
    for (int s = 0; s < dyn.n_states; ++s)
        for (int a = 0; a < A; ++a)
            out.at(s, a) = reward[static_cast<std::size_t>(s) * A + a] + gamma * v[dyn.next_of(s, a)];
    return out;
}

SoftViResult soft_value_iteration(const TabularDyn& dyn, const RewardTable& reward,
                                  const Mask& allowed, double gamma, double tol,
                                  long max_iterations) {
    if (!(tol > 0.0)) throw DomainError("soft_value_iteration: tol must be positive");
    TabularQ q(dyn.n_states, dyn.n_actions, gamma);
    SoftViResult result{q, 0, std::numeric_limits<double>::infinity()};
    for (long it = 1; it <= max_iterations; ++it) {
        TabularQ next = soft_backup(result.q, dyn, reward, allowed);
        double resid = 0.0;
        for (std::size_t i = 0; i < next.raw().size(); ++i)
            resid = std::max(resid, std::abs(next.raw()[i] - result.q.raw()[i]));
        result.q = std::move(next);
        result.iterations = it;
        result.residual = resid;
        if (resid <= tol) return result;
        if (!std::isfinite(resid))
            throw RuntimeAbort("soft_value_iteration: diverged at iteration " + std::to_string(it));
    }
    throw RuntimeAbort("soft_value_iteration: no convergence within " +
                       std::to_string(max_iterations) + " iterations (residual " +
                       std::to_string(result.residual) + ")");
}

// --- value estimation ---------------------------------------------------

ValueEstimator::ValueEstimator(std::vector<ActionVec> action_set, const ActionFilter* filter)
    : action_set_(std::move(action_set)), filter_(filter) {
    if (action_set_.empty()) throw DomainError("ValueEstimator: empty action set");
}

ValueEstimator::ValueEstimator(std::shared_ptr<const ProposalSampler> proposal, int n_candidates,
                               const ActionFilter* filter)
    : proposal_(std::move(proposal)), n_candidates_(n_candidates), filter_(filter) {
    if (!proposal_ || n_candidates_ < 1) throw DomainError("ValueEstimator: bad sampled config");
}

template <typename EvalFn>
double ValueEstimator::estimate(EvalFn&& eval, const StateVec& state, Rng& rng) const {
    if (!action_set_.empty()) {
        std::vector<double> qs(action_set_.size());
        eval(state, std::span<const ActionVec>(action_set_), std::span<double>(qs));
        if (!filter_) return log_sum_exp(qs);
        std::vector<char> mask(action_set_.size());
        filter_->mask(state, action_set_, mask);
        if (std::find(mask.begin(), mask.end(), char(1)) == mask.end())
            throw InfeasibilityError(
                "soft value: indifference space is empty at state " + format_state(state), state);
        return log_sum_exp_masked(qs, mask);
    }

    std::vector<ActionVec> cand;
    proposal_->sample_batch(state, n_candidates_, rng, cand);
    std::vector<double> dens(n_candidates_);
    proposal_->densities(state, cand, dens);
    std::vector<double> qs(n_candidates_);
    eval(state, std::span<const ActionVec>(cand), std::span<double>(qs));
    std::vector<char> mask(n_candidates_, 1);
    if (filter_) filter_->mask(state, cand, mask);
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_candidates_; ++i)
        if (mask[i] && qs[i] > m) m = qs[i];
    if (m == -std::numeric_limits<double>::infinity())
        throw InfeasibilityError("soft value: all candidates rejected at state " +
                                     format_state(state),
                                 state);
    double acc = 0.0;
    for (int i = 0; i < n_candidates_; ++i)
        if (mask[i]) acc += std::exp(qs[i] - m) / dens[i];
    return m + std::log(acc / static_cast<double>(n_candidates_));
}

double ValueEstimator::target_value(const TrainableQ& q, const StateVec& next, Rng& rng) const {
    return estimate(
        [&q](const StateVec& s, std::span<const ActionVec> as, std::span<double> out) {
            q.values_target(s, as, out);
        },
        next, rng);
}

double ValueEstimator::online_value(const SoftQ& q, const StateVec& state, Rng& rng) const {
    return estimate(
        [&q](const StateVec& s, std::span<const ActionVec> as, std::span<double> out) {
            q.values(s, as, out);
        },
        state, rng);
}

void TrainableQ::values_target(const StateVec& state, std::span<const ActionVec> actions,
                               std::span<double> out) const {
    for (std::size_t i = 0; i < actions.size(); ++i) out[i] = value_target(state, actions[i]);
}

// --- GridQ -------------------------------------------------------------

GridQ::GridQ(const EnvDescriptor& desc, int nx, int ny, int n_bins, double gamma)
    : desc_(desc), nx_(nx), ny_(ny), n_bins_(n_bins), gamma_(gamma) {
    if (desc_.state_dim != 2 || desc_.action_dim != 2)
        throw DomainError("GridQ: requires a 2-D state and action space");
    if (nx_ < 2 || ny_ < 2) throw DomainError("GridQ: resolution must be >= 2 per dimension");
    if (n_bins_ < 2) throw DomainError("GridQ: need at least 2 action bins");
    if (!(gamma_ >= 0.0 && gamma_ < 1.0)) throw DomainError("GridQ: gamma must be in [0, 1)");
    online_.assign(static_cast<std::size_t>(nx_) * ny_ * n_bins_, 0.0);
    target_ = online_;
    bins_ = angular_action_bins(n_bins_);
}

GridQ::StateW GridQ::state_weights(const StateVec& s) const {
    const double lo_x = desc_.bounds_lo[0], hi_x = desc_.bounds_hi[0];
    const double lo_y = desc_.bounds_lo[1], hi_y = desc_.bounds_hi[1];
    double gx = (s[0] - lo_x) / (hi_x - lo_x) * (nx_ - 1);
    double gy = (s[1] - lo_y) / (hi_y - lo_y) * (ny_ - 1);
    gx = std::clamp(gx, 0.0, static_cast<double>(nx_ - 1));
    gy = std::clamp(gy, 0.0, static_cast<double>(ny_ - 1));
    const int ix = std::min(static_cast<int>(gx), nx_ - 2);
    const int iy = std::min(static_cast<int>(gy), ny_ - 2);
    const double fx = gx - ix;
    const double fy = gy - iy;
    StateW w;
    const int row0 = (iy * nx_ + ix) * n_bins_;
    const int row1 = ((iy + 1) * nx_ + ix) * n_bins_;
    w.base[0] = row0;
    w.base[1] = row0 + n_bins_;
    w.base[2] = row1;
    w.base[3] = row1 + n_bins_;
    w.w[0] = (1.0 - fx) * (1.0 - fy);
    w.w[1] = fx * (1.0 - fy);
    w.w[2] = (1.0 - fx) * fy;
    w.w[3] = fx * fy;
    return w;
}

void GridQ::row(const std::vector<double>& params, const StateVec& s, std::span<double> out) const {
    const StateW w = state_weights(s);
    const double* p = params.data();
    for (int b = 0; b < n_bins_; ++b) {
        out[b] = w.w[0] * p[w.base[0] + b] + w.w[1] * p[w.base[1] + b] +
                 w.w[2] * p[w.base[2] + b] + w.w[3] * p[w.base[3] + b];
    }
}

double GridQ::value_from(const std::vector<double>& params, const StateVec& s,
                         const ActionVec& a) const {
    const StateW w = state_weights(s);
    double th = std::atan2(a[1], a[0]);
    if (th < 0.0) th += 2.0 * M_PI;
    const double t = th / (2.0 * M_PI) * n_bins_;
    int b0 = static_cast<int>(t) % n_bins_;
    const double fb = t - std::floor(t);
    const int b1 = (b0 + 1) % n_bins_;
    const double* p = params.data();
    auto bin_val = [&](int b) {
        return w.w[0] * p[w.base[0] + b] + w.w[1] * p[w.base[1] + b] + w.w[2] * p[w.base[2] + b] +
               w.w[3] * p[w.base[3] + b];
    };
    return (1.0 - fb) * bin_val(b0) + fb * bin_val(b1);
}

double GridQ::value(const StateVec& s, const ActionVec& a) const {
    return value_from(online_, s, a);
}

double GridQ::value_target(const StateVec& s, const ActionVec& a) const {
    return value_from(target_, s, a);
}

// Candidate lists are very often exactly this grid's own bin set; detecting
// that (elementwise, with an early exit) lets the row be returned directly
// instead of re-deriving the angle decomposition per action.
bool GridQ::is_native_bin_set(std::span<const ActionVec> actions) const {
    if (static_cast<int>(actions.size()) != n_bins_) return false;
    for (int k = 0; k < n_bins_; ++k) {
        if (actions[k].size() != 2 || actions[k][0] != bins_[k][0] ||
            actions[k][1] != bins_[k][1])
            return false;
    }
    return true;
}

void GridQ::values(const StateVec& s, std::span<const ActionVec> actions,
                   std::span<double> out) const {
    if (is_native_bin_set(actions)) {
        row(online_, s, out);
        return;
    }
    // One bilinear row, then periodic angle interpolation per action.
    static thread_local std::vector<double> rowbuf;
    rowbuf.resize(n_bins_);
    row(online_, s, rowbuf);
    for (std::size_t i = 0; i < actions.size(); ++i) {
        double th = std::atan2(actions[i][1], actions[i][0]);
        if (th < 0.0) th += 2.0 * M_PI;
        const double t = th / (2.0 * M_PI) * n_bins_;
        const int b0 = static_cast<int>(t) % n_bins_;
        const double fb = t - std::floor(t);
        out[i] = (1.0 - fb) * rowbuf[b0] + fb * rowbuf[(b0 + 1) % n_bins_];
    }
}

void GridQ::values_target(const StateVec& s, std::span<const ActionVec> actions,
                          std::span<double> out) const {
    if (is_native_bin_set(actions)) {
        row(target_, s, out);
        return;
    }
    static thread_local std::vector<double> rowbuf;
    rowbuf.resize(n_bins_);
    row(target_, s, rowbuf);
    for (std::size_t i = 0; i < actions.size(); ++i) {
        double th = std::atan2(actions[i][1], actions[i][0]);
        if (th < 0.0) th += 2.0 * M_PI;
        const double t = th / (2.0 * M_PI) * n_bins_;
        const int b0 = static_cast<int>(t) % n_bins_;
        const double fb = t - std::floor(t);
        out[i] = (1.0 - fb) * rowbuf[b0] + fb * rowbuf[(b0 + 1) % n_bins_];
    }
}

void GridQ::bin_values(const StateVec& s, std::span<double> out) const {
    row(online_, s, out);
}

void GridQ::bin_values_target(const StateVec& s, std::span<double> out) const {
    row(target_, s, out);
}

double GridQ::node(int ix, int iy, int bin) const {
    return online_[(static_cast<std::size_t>(iy) * nx_ + ix) * n_bins_ + bin];
}

double& GridQ::node(int ix, int iy, int bin) {
    return online_[(static_cast<std::size_t>(iy) * nx_ + ix) * n_bins_ + bin];
}

double GridQ::td_update(std::span<const Transition> batch, const ValueEstimator& estimator,
                        double learn_rate, Rng& rng, const TdBatchOptions& opt) {
    if (batch.empty()) throw DomainError("td_update: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    // Targets come from the frozen target parameters; the online parameters
    // then take one SGD step per sample in batch order. The per-sample form
    // keeps the step stable when samples share interpolation nodes.
    std::vector<double> targets(batch.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Transition& tr = batch[i];
        const double r = opt.reward_fn ? opt.reward_fn(tr) : tr.reward.at(opt.subtask - 1);
        targets[i] = r + gamma_ * estimator.target_value(*this, tr.next_state, rng);
        const double resid = value_from(online_, tr.state, tr.action) - targets[i];
        if (!std::isfinite(resid))
            throw RuntimeAbort("td_update: non-finite TD residual at state " +
                               format_state(tr.state));
        loss += 0.5 * resid * resid;
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Transition& tr = batch[i];
        const double resid = value_from(online_, tr.state, tr.action) - targets[i];
        const StateW w = state_weights(tr.state);
        double th = std::atan2(tr.action[1], tr.action[0]);
        if (th < 0.0) th += 2.0 * M_PI;
        const double t = th / (2.0 * M_PI) * n_bins_;
        const int b0 = static_cast<int>(t) % n_bins_;
        const double fb = t - std::floor(t);
        const int b1 = (b0 + 1) % n_bins_;
        const double step = learn_rate * resid;
        for (int j = 0; j < 4; ++j) {
            online_[w.base[j] + b0] -= step * w.w[j] * (1.0 - fb);
            if (fb > 0.0) online_[w.base[j] + b1] -= step * w.w[j] * fb;
        }
    }
    return loss * inv_b;
}

void GridQ::polyak_update(double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw DomainError("polyak_update: tau must be in (0, 1]");
    for (std::size_t i = 0; i < online_.size(); ++i)
        target_[i] = tau * online_[i] + (1.0 - tau) * target_[i];
}

// --- MlpQ --------------------------------------------------------------

MlpQ::MlpQ(const EnvDescriptor& desc, std::vector<int> hidden, double gamma, Rng& init_rng)
    : desc_(desc), gamma_(gamma) {
    if (!(gamma_ >= 0.0 && gamma_ < 1.0)) throw DomainError("MlpQ: gamma must be in [0, 1)");
    sizes_.push_back(desc_.state_dim + desc_.action_dim);
    for (int h : hidden) {
        if (h < 1) throw DomainError("MlpQ: bad hidden width");
        sizes_.push_back(h);
    }
    sizes_.push_back(1);
    std::size_t count = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
        count += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1] + sizes_[l + 1];
    params_.resize(count);
    std::size_t k = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
        for (int i = 0; i < sizes_[l] * sizes_[l + 1]; ++i) params_[k++] = scale * init_rng.normal();
        for (int i = 0; i < sizes_[l + 1]; ++i) params_[k++] = 0.0;
    }
    target_ = params_;
}

void MlpQ::concat_input(const StateVec& s, const ActionVec& a, std::vector<double>& out) const {
    out.clear();
    out.insert(out.end(), s.begin(), s.end());
    out.insert(out.end(), a.begin(), a.end());
    if (out.size() != static_cast<std::size_t>(sizes_[0]))
        throw DomainError("MlpQ: state/action dimensions do not match the network input");
}

double MlpQ::forward(const std::vector<double>& params, std::span<const double> input,
                     std::vector<std::vector<double>>* activations) const {
    std::vector<double> cur(input.begin(), input.end());
    if (activations) activations->clear();
    std::size_t k = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        const int in = sizes_[l];
        const int out_n = sizes_[l + 1];
        const bool last = (l + 2 == sizes_.size());
        std::vector<double> next(out_n);
        for (int o = 0; o < out_n; ++o) {
            double acc = 0.0;
            const double* wrow = params.data() + k + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += wrow[i] * cur[i];
            acc += params[k + static_cast<std::size_t>(in) * out_n + o];
            next[o] = last ? acc : std::tanh(acc);
        }
        k += static_cast<std::size_t>(in) * out_n + out_n;
        if (activations) activations->push_back(next);
        cur = std::move(next);
    }
    return cur[0];
}

void MlpQ::accumulate_gradient(const std::vector<std::vector<double>>& activations,
                               std::span<const double> input, double upstream,
                               std::vector<double>& grad) const {
    // Layer offsets into the flat parameter vector.
    std::vector<std::size_t> offs(sizes_.size() - 1);
    std::size_t k = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        offs[l] = k;
        k += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1] + sizes_[l + 1];
    }
    std::vector<double> delta = {upstream};
    for (int l = static_cast<int>(sizes_.size()) - 2; l >= 0; --l) {
        const int in = sizes_[l];
        const int out_n = sizes_[l + 1];
        const std::span<const double> below =
            l == 0 ? input : std::span<const double>(activations[l - 1]);
        std::vector<double> prev_delta(in, 0.0);
        for (int o = 0; o < out_n; ++o) {
            const double d = delta[o];
            double* wgrad = grad.data() + offs[l] + static_cast<std::size_t>(o) * in;
            const double* wrow = params_.data() + offs[l] + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) {
                wgrad[i] += d * below[i];
                prev_delta[i] += d * wrow[i];
            }
            grad[offs[l] + static_cast<std::size_t>(in) * out_n + o] += d;
        }
        if (l > 0) {
            const std::vector<double>& act = activations[l - 1];
            for (int i = 0; i < in; ++i) prev_delta[i] *= (1.0 - act[i] * act[i]);
        }
        delta = std::move(prev_delta);
    }
}

double MlpQ::value(const StateVec& s, const ActionVec& a) const {
    std::vector<double> in;
    concat_input(s, a, in);
    return forward(params_, in, nullptr);
}

double MlpQ::value_target(const StateVec& s, const ActionVec& a) const {
    std::vector<double> in;
    concat_input(s, a, in);
    return forward(target_, in, nullptr);
}

void MlpQ::value_gradient(const StateVec& s, const ActionVec& a, std::span<double> grad_out) const {
    if (grad_out.size() != params_.size()) throw DomainError("MlpQ: gradient buffer size mismatch");
    std::vector<double> in;
    concat_input(s, a, in);
    std::vector<std::vector<double>> acts;
    forward(params_, in, &acts);
    std::vector<double> grad(params_.size(), 0.0);
    accumulate_gradient(acts, in, 1.0, grad);
    std::copy(grad.begin(), grad.end(), grad_out.begin());
}

double MlpQ::td_update(std::span<const Transition> batch, const ValueEstimator& estimator,
                       double learn_rate, Rng& rng, const TdBatchOptions& opt) {
    if (batch.empty()) throw DomainError("td_update: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<double> grad(params_.size(), 0.0);
    std::vector<double> in;
    std::vector<std::vector<double>> acts;
    double loss = 0.0;
    for (const Transition& tr : batch) {
        const double r = opt.reward_fn ? opt.reward_fn(tr) : tr.reward.at(opt.subtask - 1);
        const double target = r + gamma_ * estimator.target_value(*this, tr.next_state, rng);
        concat_input(tr.state, tr.action, in);
        const double q_sa = forward(params_, in, &acts);
        const double resid = q_sa - target;
        if (!std::isfinite(resid))
            throw RuntimeAbort("td_update: non-finite TD residual at state " +
                               format_state(tr.state));
        loss += 0.5 * resid * resid;
        accumulate_gradient(acts, in, resid * inv_b, grad);
    }
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i] -= learn_rate * grad[i];
    return loss * inv_b;
}

void MlpQ::polyak_update(double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw DomainError("polyak_update: tau must be in (0, 1]");
    if (target_.size() != params_.size())
        throw std::logic_error("polyak_update: online/target shape mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i)
        target_[i] = tau * params_[i] + (1.0 - tau) * target_[i];
}

double td_update(TrainableQ& q, std::span<const Transition> batch, const ValueEstimator& estimator,
                 double learn_rate, Rng& rng, const TdBatchOptions& opt) {
    return q.td_update(batch, estimator, learn_rate, rng, opt);
}

void polyak_update(TrainableQ& q, double tau) {
    q.polyak_update(tau);
}

} // namespace psqd
