#include "psqd/lexi.hpp"

#include "psqd/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
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

std::uint64_t hash_state(const StateVec& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double x : s) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof(bits));
        h = (h ^ bits) * 0x100000001b3ull;
    }
    return h;
}

} // namespace

MaxEstimator MaxEstimator::exact(std::vector<ActionVec> set) {
    if (set.empty()) throw DomainError("MaxEstimator: empty action set");
    MaxEstimator est;
    est.kind = Kind::ExactSet;
    est.action_set = std::move(set);
    return est;
}

MaxEstimator MaxEstimator::sample_max(int n_candidates, std::uint64_t seed) {
    if (n_candidates < 1) throw DomainError("MaxEstimator: candidate count must be >= 1");
    MaxEstimator est;
    est.kind = Kind::SampleMax;
    est.n_candidates = n_candidates;
    est.seed = seed;
    return est;
}

double MaxEstimator::max_value(const SoftQ& q, const StateVec& state) const {
    if (kind == Kind::ExactSet) {
        std::vector<double> qs(action_set.size());
        q.values(state, action_set, qs);
        const double m = *std::max_element(qs.begin(), qs.end());
        if (!std::isfinite(m))
            throw RuntimeAbort("constraint evaluation: non-finite Q at state " +
                               format_state(state));
        return m;
    }
    Rng rng(hash_state(state) ^ seed);
    const int dim = q.descriptor().action_dim;
    double m = -std::numeric_limits<double>::infinity();
    std::vector<ActionVec> cand(1);
    double val = 0.0;
    for (int i = 0; i < n_candidates; ++i) {
        cand[0] = rng.unit_vector(dim);
        q.values(state, cand, {&val, 1});
        m = std::max(m, val);
    }
    if (!std::isfinite(m))
        throw RuntimeAbort("constraint evaluation: non-finite Q at state " + format_state(state));
    return m;
}

IndifferenceConstraint::IndifferenceConstraint(std::shared_ptr<const SoftQ> q, double epsilon,
                                               MaxEstimator estimator)
    : q_(std::move(q)), epsilon_(epsilon), estimator_(std::move(estimator)) {
    if (!q_) throw DomainError("IndifferenceConstraint: null Q");
    if (!(epsilon_ >= 0.0)) throw DomainError("IndifferenceConstraint: epsilon must be >= 0");
}

double IndifferenceConstraint::max_value(const StateVec& state) const {
    return estimator_.max_value(*q_, state);
}

bool IndifferenceConstraint::indicator_given_max(double max_value, double q_value) const {
    if (!std::isfinite(q_value))
        throw RuntimeAbort("constraint evaluation: non-finite Q value");
    return max_value - q_value <= epsilon_;
}

bool IndifferenceConstraint::indicator(const StateVec& state, const ActionVec& action) const {
    return indicator_given_max(max_value(state), q_->value(state, action));
}

bool indicator(const IndifferenceConstraint& c, const StateVec& state, const ActionVec& action) {
    return c.indicator(state, action);
}

std::vector<ActionVec> indifference_set(const IndifferenceConstraint& c, const StateVec& state,
                                        std::span<const ActionVec> candidates) {
    if (candidates.empty()) throw DomainError("indifference_set: empty candidate set");
    const double m = c.max_value(state);
    std::vector<double> qs(candidates.size());
    c.q().values(state, candidates, qs);
    std::vector<ActionVec> out;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (c.indicator_given_max(m, qs[i])) out.push_back(candidates[i]);
    return out;
}

ConstraintStack::ConstraintStack(std::vector<IndifferenceConstraint> constraints)
    : constraints_(std::move(constraints)) {}

void ConstraintStack::mask(const StateVec& state, std::span<const ActionVec> candidates,
                           std::span<char> out) const {
    std::fill(out.begin(), out.end(), char(1));
    std::vector<double> qs(candidates.size());
    for (const auto& c : constraints_) {
        const double m = c.max_value(state); // one max per constraint per call
        c.q().values(state, candidates, qs);
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (out[i] && !c.indicator_given_max(m, qs[i])) out[i] = 0;
    }
}

bool ConstraintStack::permits(const StateVec& state, const ActionVec& action) const {
    for (const auto& c : constraints_)
        if (!c.indicator(state, action)) return false;
    return true;
}

std::vector<double> ConstraintStack::max_values(const StateVec& state) const {
    std::vector<double> maxes(constraints_.size());
    for (std::size_t i = 0; i < constraints_.size(); ++i) maxes[i] = constraints_[i].max_value(state);
    return maxes;
}

int ConstraintStack::first_violated(const StateVec& state, const ActionVec& action,
                                    std::span<const double> maxes) const {
    for (std::size_t i = 0; i < constraints_.size(); ++i) {
        const double qv = constraints_[i].q().value(state, action);
        if (!constraints_[i].indicator_given_max(maxes[i], qv)) return static_cast<int>(i);
    }
    return -1;
}

ComposedQ::ComposedQ(ConstraintStack stack, std::shared_ptr<const SoftQ> q_low)
    : stack_(std::move(stack)), q_low_(std::move(q_low)) {
    if (!q_low_) throw DomainError("ComposedQ: null low-priority Q");
}

ComposedValue ComposedQ::evaluate(const StateVec& state, const ActionVec& action) const {
    if (!stack_.permits(state, action)) return {false, 0.0};
    return {true, q_low_->value(state, action)};
}

ComposedQ compose_zero_shot(ConstraintStack stack, std::shared_ptr<const SoftQ> q_low) {
    return ComposedQ(std::move(stack), std::move(q_low));
}

ArbiterPolicy::ArbiterPolicy(ComposedQ composed, std::shared_ptr<const ProposalSampler> proposal,
                             ArbiterOptions options)
    : composed_(std::move(composed)), proposal_(std::move(proposal)), options_(std::move(options)) {
    if (options_.exact_set.empty() && !proposal_)
        throw DomainError("ArbiterPolicy: need a proposal sampler or an exact action set");
    if (options_.batch_size < 1 || options_.rejection_cap < options_.batch_size)
        throw DomainError("ArbiterPolicy: bad sampling budget");
}

ActionVec ArbiterPolicy::act(const StateVec& state, Rng& rng) const {
    return options_.exact_set.empty() ? sample_rejection(state, rng) : sample_exact(state, rng);
}

ActionVec ArbiterPolicy::sample_exact(const StateVec& state, Rng& rng) const {
    const auto& set = options_.exact_set;
    const auto& stack = composed_.stack();
    std::vector<char> mask(set.size(), 1);
    stack.mask(state, set, mask);

    std::vector<double> qs(set.size());
    composed_.q_low().values(state, set, qs);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < set.size(); ++i)
        if (mask[i] && qs[i] > m) m = qs[i];
    if (m == -std::numeric_limits<double>::infinity()) {
        // Attribute each rejection to the first failing constraint.
        std::vector<long> rejections(stack.size(), 0);
        const auto maxes = stack.max_values(state);
        for (const auto& a : set) {
            const int v = stack.first_violated(state, a, maxes);
            if (v >= 0) ++rejections[v];
        }
        throw InfeasibilityError("arbiter: empty indifference space at state " +
                                     format_state(state),
                                 state, rejections);
    }
    double total = 0.0;
    std::vector<double> w(set.size(), 0.0);
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (!mask[i]) continue;
        w[i] = std::exp(qs[i] - m);
        total += w[i];
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (!mask[i]) continue;
        u -= w[i];
        if (u < 0.0) return set[i];
    }
    for (std::size_t i = set.size(); i-- > 0;)
        if (mask[i]) return set[i];
    throw RuntimeAbort("arbiter: unreachable");
}

ActionVec ArbiterPolicy::sample_rejection(const StateVec& state, Rng& rng) const {
    const auto& stack = composed_.stack();
    const auto maxes = stack.max_values(state);

    std::vector<ActionVec> accepted;
    std::vector<double> acc_density;
    std::vector<long> rejections(stack.size(), 0);

    std::vector<ActionVec> cand;
    std::vector<double> dens;
    std::vector<char> mask;
    int drawn = 0;
    while (drawn < options_.rejection_cap) {
        const int n = std::min(options_.batch_size, options_.rejection_cap - drawn);
        proposal_->sample_batch(state, n, rng, cand);
        dens.resize(cand.size());
        proposal_->densities(state, cand, dens);
        mask.assign(cand.size(), 1);
        stack.mask(state, cand, mask);
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (mask[i]) {
                accepted.push_back(cand[i]);
                acc_density.push_back(dens[i]);
            } else {
                const int v = stack.first_violated(state, cand[i], maxes);
                if (v >= 0) ++rejections[v];
            }
        }
        drawn += n;
        if (!accepted.empty()) break;
    }
    if (accepted.empty())
        throw InfeasibilityError("arbiter: rejection cap exhausted with no permitted action at "
                                 "state " +
                                     format_state(state),
                                 state, rejections);

    std::vector<double> qs(accepted.size());
    composed_.q_low().values(state, accepted, qs);
    const double m = *std::max_element(qs.begin(), qs.end());
    if (!std::isfinite(m))
        throw RuntimeAbort("arbiter: non-finite Q among accepted candidates at state " +
                           format_state(state));
    std::vector<double> w(accepted.size());
    double total = 0.0;
    for (std::size_t i = 0; i < accepted.size(); ++i) {
        w[i] = std::exp(qs[i] - m) / acc_density[i];
        total += w[i];
    }
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < accepted.size(); ++i) {
        u -= w[i];
        if (u < 0.0) return accepted[i];
    }
    return accepted.back();
}

ActionVec arbiter_sample(const ArbiterPolicy& policy, const StateVec& state, Rng& rng) {
    return policy.act(state, rng);
}

double global_indifference_measure(const ConstraintStack& stack, const StateVec& state,
                                   std::span<const ActionVec> candidate_grid) {
    if (candidate_grid.empty()) throw DomainError("global_indifference_measure: empty grid");
    std::vector<char> mask(candidate_grid.size(), 1);
    stack.mask(state, candidate_grid, mask);
    long count = 0;
    for (char c : mask) count += c;
    return static_cast<double>(count) / static_cast<double>(candidate_grid.size());
}

Mask stack_mask(const Gridworld& env, const ConstraintStack& stack) {
    const auto actions = Gridworld::action_set();
    const int A = Gridworld::n_actions();
    Mask mask(static_cast<std::size_t>(env.n_states()) * A, 1);
    if (stack.empty()) return mask;
    std::vector<char> row(A);
    for (int s = 0; s < env.n_states(); ++s) {
        stack.mask(env.state_of(s), actions, row);
        for (int a = 0; a < A; ++a) mask[static_cast<std::size_t>(s) * A + a] = row[a];
    }
    return mask;
}

namespace {

RewardTable reward_table(const Gridworld& env, int subtask) {
    const int A = Gridworld::n_actions();
    RewardTable r(static_cast<std::size_t>(env.n_states()) * A);
    for (int s = 0; s < env.n_states(); ++s)
        for (int a = 0; a < A; ++a)
            r[static_cast<std::size_t>(s) * A + a] = env.reward_sa(subtask, s, a);
    return r;
}

} // namespace

TabularQ prioritized_backup(const TabularQ& q, const Gridworld& env, const ConstraintStack& stack,
                            int low_subtask) {
    return soft_backup(q, TabularDyn::from(env), reward_table(env, low_subtask),
                       stack_mask(env, stack));
}

SoftViResult prioritized_soft_vi(const Gridworld& env, const ConstraintStack& stack,
                                 int low_subtask, double gamma, double tol, long max_iterations) {
    SoftViResult result =
        soft_value_iteration(TabularDyn::from(env), reward_table(env, low_subtask),
                             stack_mask(env, stack), gamma, tol, max_iterations);
    result.q.bind_geometry(env);
    return result;
}

} // namespace psqd
