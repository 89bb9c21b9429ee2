#pragma once

#include "psqd/softq.hpp"

#include <memory>
#include <vector>

namespace psqd {

class Gridworld;

/// Estimates max_a' Q(s, a'): exactly over a finite action set, or as a
/// sample max over uniform sphere candidates. Sample-max candidates are
/// drawn from a per-state deterministic stream (hash of the state coords
/// mixed with `seed`), so repeated queries at one state agree. The sample
/// max is biased low, which makes constraints conservative-permissive.
struct MaxEstimator {
    enum class Kind { ExactSet, SampleMax };

    Kind kind = Kind::ExactSet;
    std::vector<ActionVec> action_set; // ExactSet
    int n_candidates = 256;            // SampleMax
    std::uint64_t seed = 0;            // SampleMax candidate stream

    static MaxEstimator exact(std::vector<ActionVec> set);
    static MaxEstimator sample_max(int n_candidates, std::uint64_t seed = 0);

    double max_value(const SoftQ& q, const StateVec& state) const;
};

/// A higher-priority subtask Q with its epsilon threshold: answers whether
/// an action stays within epsilon of the per-state optimum. The boundary is
/// non-strict, so exactly-epsilon actions are permitted.
class IndifferenceConstraint {
public:
    IndifferenceConstraint(std::shared_ptr<const SoftQ> q, double epsilon, MaxEstimator estimator);

    double epsilon() const { return epsilon_; }
    const SoftQ& q() const { return *q_; }
    std::shared_ptr<const SoftQ> q_ptr() const { return q_; }
    const MaxEstimator& max_estimator() const { return estimator_; }

    double max_value(const StateVec& state) const;
    bool indicator(const StateVec& state, const ActionVec& action) const;
    bool indicator_given_max(double max_value, double q_value) const;

private:
    std::shared_ptr<const SoftQ> q_;
    double epsilon_;
    MaxEstimator estimator_;
};

bool indicator(const IndifferenceConstraint& c, const StateVec& state, const ActionVec& action);

/// The candidates whose indicator is 1.
std::vector<ActionVec> indifference_set(const IndifferenceConstraint& c, const StateVec& state,
                                        std::span<const ActionVec> candidates);

/// Ordered constraints, highest priority first. Masking evaluates each
/// constraint's per-state max exactly once per call.
class ConstraintStack : public ActionFilter {
public:
    ConstraintStack() = default;
    explicit ConstraintStack(std::vector<IndifferenceConstraint> constraints);

    bool empty() const { return constraints_.empty(); }
    std::size_t size() const { return constraints_.size(); }
    const IndifferenceConstraint& at(std::size_t i) const { return constraints_[i]; }

    void mask(const StateVec& state, std::span<const ActionVec> candidates,
              std::span<char> out) const override;

    bool permits(const StateVec& state, const ActionVec& action) const;

    /// Per-constraint max values at a state, in stack order.
    std::vector<double> max_values(const StateVec& state) const;

    /// Index of the first constraint rejecting the action given cached
    /// maxes, or -1 when all permit.
    int first_violated(const StateVec& state, const ActionVec& action,
                       std::span<const double> maxes) const;

private:
    std::vector<IndifferenceConstraint> constraints_;
};

struct ComposedValue {
    bool permitted;
    double value; // Q_low(s, a); only meaningful when permitted
};

/// The transformed Q of the composed task: forbidden actions are reported
/// through the `permitted` flag instead of -inf arithmetic, and the value
/// equals the lowest-priority Q wherever permitted.
class ComposedQ {
public:
    ComposedQ(ConstraintStack stack, std::shared_ptr<const SoftQ> q_low);

    ComposedValue evaluate(const StateVec& state, const ActionVec& action) const;

    const ConstraintStack& stack() const { return stack_; }
    const SoftQ& q_low() const { return *q_low_; }
    std::shared_ptr<const SoftQ> q_low_ptr() const { return q_low_; }

private:
    ConstraintStack stack_;
    std::shared_ptr<const SoftQ> q_low_;
};

/// Zero-shot composition from frozen snapshots; no learning happens here.
ComposedQ compose_zero_shot(ConstraintStack stack, std::shared_ptr<const SoftQ> q_low);

struct ArbiterOptions {
    int batch_size = 256;     // proposal draws per rejection round
    int rejection_cap = 4096; // total draws before failing hard
    /// Non-empty: sample exactly over this finite action set instead of
    /// rejection sampling (the discrete-action limit of the same policy).
    std::vector<ActionVec> exact_set;
};

/// Boltzmann policy in Q_low restricted to the global indifference space.
/// Every emitted action satisfies every constraint indicator; exhaustion of
/// the rejection cap raises InfeasibilityError with per-constraint
/// rejection counts (attributed to the first failing constraint).
class ArbiterPolicy : public Policy {
public:
    ArbiterPolicy(ComposedQ composed, std::shared_ptr<const ProposalSampler> proposal,
                  ArbiterOptions options = {});

    ActionVec act(const StateVec& state, Rng& rng) const override;

    const ComposedQ& composed() const { return composed_; }
    const ArbiterOptions& options() const { return options_; }

private:
    ActionVec sample_exact(const StateVec& state, Rng& rng) const;
    ActionVec sample_rejection(const StateVec& state, Rng& rng) const;

    ComposedQ composed_;
    std::shared_ptr<const ProposalSampler> proposal_;
    ArbiterOptions options_;
};

ActionVec arbiter_sample(const ArbiterPolicy& policy, const StateVec& state, Rng& rng);

/// Fraction of grid candidates permitted by every constraint.
double global_indifference_measure(const ConstraintStack& stack, const StateVec& state,
                                   std::span<const ActionVec> candidate_grid);

/// Allowed-action mask of a gridworld under a constraint stack.
Mask stack_mask(const Gridworld& env, const ConstraintStack& stack);

/// One application of the prioritized soft Bellman operator: the usual soft
/// backup with the log-integral restricted to the global indifference space
/// of the stack.
TabularQ prioritized_backup(const TabularQ& q, const Gridworld& env, const ConstraintStack& stack,
                            int low_subtask);

/// Fixed point of the prioritized operator via iteration to tolerance.
SoftViResult prioritized_soft_vi(const Gridworld& env, const ConstraintStack& stack,
                                 int low_subtask, double gamma, double tol,
                                 long max_iterations = 1'000'000);

} // namespace psqd
