#pragma once

#include "psqd/env.hpp"
#include "psqd/math.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace psqd {

/// Raised when an indifference space (or an allowed-action mask) is empty.
/// Carries the offending state and, when applicable, per-constraint
/// rejection counts.
class InfeasibilityError : public RuntimeAbort {
public:
    InfeasibilityError(std::string msg, StateVec state, std::vector<long> rejections = {})
        : RuntimeAbort(std::move(msg)), state(std::move(state)), rejections(std::move(rejections)) {}
    StateVec state;
    std::vector<long> rejections;
};

/// Read-only soft Q-function. Evaluation is const and safe to call from
/// many threads; mutation is confined to the trainable subclasses.
class SoftQ {
public:
    virtual ~SoftQ() = default;

    virtual const EnvDescriptor& descriptor() const = 0;
    virtual double gamma() const = 0;
    virtual double value(const StateVec& state, const ActionVec& action) const = 0;

    /// Batch evaluation; overridden where a bulk path is cheaper.
    virtual void values(const StateVec& state, std::span<const ActionVec> actions,
                        std::span<double> out) const;

    virtual std::string kind() const = 0;
    virtual std::unique_ptr<SoftQ> clone() const = 0;
};

/// Restricts candidate actions at a state. Implemented by the constraint
/// stack; kept abstract here so the value machinery does not depend on it.
class ActionFilter {
public:
    virtual ~ActionFilter() = default;
    virtual void mask(const StateVec& state, std::span<const ActionVec> candidates,
                      std::span<char> out) const = 0;
};

/// Candidate actions for soft-value estimation. With `exact_discrete` the
/// set is treated as the full discrete action space and the soft value is
/// the exact log-sum-exp; otherwise candidates are proposal samples and the
/// value is the self-normalized importance estimate of log integral exp(Q).
struct ActionSampleSet {
    std::vector<ActionVec> actions;
    std::vector<double> densities; // ignored in exact_discrete mode
    bool exact_discrete = false;

    static ActionSampleSet exact(std::vector<ActionVec> actions);
};

/// Soft state value log sum/integral of exp(Q(s, .)) over the candidate
/// set. Stable under large |Q| via max-shift.
double soft_value(const SoftQ& q, const StateVec& state, const ActionSampleSet& actions);

/// Unit vectors at angles 2*pi*k/n, k = 0..n-1.
std::vector<ActionVec> angular_action_bins(int n_bins);

/// Samplers with evaluable density (probability mass for finite action
/// sets, Lebesgue density on the sphere), used as importance proposals.
class ProposalSampler {
public:
    virtual ~ProposalSampler() = default;
    virtual ActionVec sample(const StateVec& state, Rng& rng) const = 0;
    virtual double density(const StateVec& state, const ActionVec& action) const = 0;

    /// Batch forms; overridden where per-state work can be shared.
    virtual void sample_batch(const StateVec& state, int n, Rng& rng,
                              std::vector<ActionVec>& out) const;
    virtual void densities(const StateVec& state, std::span<const ActionVec> actions,
                           std::span<double> out) const;
};

class UniformSetProposal : public ProposalSampler {
public:
    explicit UniformSetProposal(std::vector<ActionVec> set);
    ActionVec sample(const StateVec&, Rng& rng) const override;
    double density(const StateVec&, const ActionVec&) const override;

private:
    std::vector<ActionVec> set_;
};

/// Boltzmann distribution of a Q-function over a finite action set,
/// normalized exactly. The referenced Q may keep training; samples always
/// reflect its current values.
class BoltzmannSetProposal : public ProposalSampler {
public:
    BoltzmannSetProposal(std::shared_ptr<const SoftQ> q, std::vector<ActionVec> set);
    ActionVec sample(const StateVec& state, Rng& rng) const override;
    double density(const StateVec& state, const ActionVec& action) const override;
    void sample_batch(const StateVec& state, int n, Rng& rng,
                      std::vector<ActionVec>& out) const override;
    void densities(const StateVec& state, std::span<const ActionVec> actions,
                   std::span<double> out) const override;

private:
    void masses(const StateVec& state, std::span<double> out) const;
    std::shared_ptr<const SoftQ> q_;
    std::vector<ActionVec> set_;
};

class UniformSphereProposal : public ProposalSampler {
public:
    explicit UniformSphereProposal(int dim);
    ActionVec sample(const StateVec&, Rng& rng) const override;
    double density(const StateVec&, const ActionVec&) const override;

private:
    int dim_;
    double density_;
};

class MixtureProposal : public ProposalSampler {
public:
    MixtureProposal(std::vector<std::shared_ptr<const ProposalSampler>> components,
                    std::vector<double> weights);
    ActionVec sample(const StateVec& state, Rng& rng) const override;
    double density(const StateVec& state, const ActionVec& action) const override;
    void sample_batch(const StateVec& state, int n, Rng& rng,
                      std::vector<ActionVec>& out) const override;
    void densities(const StateVec& state, std::span<const ActionVec> actions,
                   std::span<double> out) const override;

private:
    std::vector<std::shared_ptr<const ProposalSampler>> components_;
    std::vector<double> weights_;
};

/// One action distributed (asymptotically, in the candidate count) as
/// exp(Q(s, .)) / Z via sampling-importance-resampling.
ActionVec boltzmann_sample(const SoftQ& q, const StateVec& state, const ProposalSampler& proposal,
                           Rng& rng, int n_candidates = 256);

class Policy {
public:
    virtual ~Policy() = default;
    virtual ActionVec act(const StateVec& state, Rng& rng) const = 0;
};

/// Exact Boltzmann policy over a finite action set.
class BoltzmannSetPolicy : public Policy {
public:
    BoltzmannSetPolicy(std::shared_ptr<const SoftQ> q, std::vector<ActionVec> set);
    ActionVec act(const StateVec& state, Rng& rng) const override;

private:
    BoltzmannSetProposal proposal_;
};

class UniformSetPolicy : public Policy {
public:
    explicit UniformSetPolicy(std::vector<ActionVec> set);
    ActionVec act(const StateVec&, Rng& rng) const override;

private:
    std::vector<ActionVec> set_;
};

/// Boltzmann policy realized by sampling-importance-resampling against a
/// proposal with full support; used where the action space has no finite
/// enumeration.
class BoltzmannSampledPolicy : public Policy {
public:
    BoltzmannSampledPolicy(std::shared_ptr<const SoftQ> q,
                           std::shared_ptr<const ProposalSampler> proposal, int n_candidates);
    ActionVec act(const StateVec& state, Rng& rng) const override;

private:
    std::shared_ptr<const SoftQ> q_;
    std::shared_ptr<const ProposalSampler> proposal_;
    int n_candidates_;
};

/// Greedy argmax over a finite action set (ties to the lowest index).
class GreedySetPolicy : public Policy {
public:
    GreedySetPolicy(std::shared_ptr<const SoftQ> q, std::vector<ActionVec> set);
    ActionVec act(const StateVec& state, Rng&) const override;

private:
    std::shared_ptr<const SoftQ> q_;
    std::vector<ActionVec> set_;
};

// ---------------------------------------------------------------------------
// Tabular representation and dynamic programming
// ---------------------------------------------------------------------------

class Gridworld;

/// Deterministic finite MDP dynamics, flattened for the tabular machinery.
struct TabularDyn {
    int n_states = 0;
    int n_actions = 0;
    std::vector<int> next; // n_states * n_actions successor indices

    int next_of(int s, int a) const { return next[static_cast<std::size_t>(s) * n_actions + a]; }
    static TabularDyn from(const Gridworld& env);
};

/// Allowed-action mask, n_states * n_actions; empty vector means all allowed.
using Mask = std::vector<char>;
/// Reward per (state, action), flattened.
using RewardTable = std::vector<double>;

class TabularQ : public SoftQ {
public:
    TabularQ(int n_states, int n_actions, double gamma);
    TabularQ(const Gridworld& env, double gamma);

    double& at(int s, int a) { return table_[static_cast<std::size_t>(s) * n_actions_ + a]; }
    double at(int s, int a) const { return table_[static_cast<std::size_t>(s) * n_actions_ + a]; }

    int n_states() const { return n_states_; }
    int n_actions() const { return n_actions_; }
    std::span<const double> row(int s) const;
    std::vector<double>& raw() { return table_; }
    const std::vector<double>& raw() const { return table_; }

    const EnvDescriptor& descriptor() const override { return desc_; }
    double gamma() const override { return gamma_; }
    double value(const StateVec& state, const ActionVec& action) const override;
    std::string kind() const override { return "tabular"; }
    std::unique_ptr<SoftQ> clone() const override { return std::make_unique<TabularQ>(*this); }

    int state_index(const StateVec& state) const;

    /// Attaches the gridworld's descriptor and cell mapping so the table
    /// can be evaluated through the SoftQ interface.
    void bind_geometry(const Gridworld& env);

private:
    friend class SnapshotCodec;
    int n_states_;
    int n_actions_;
    int grid_width_ = 0; // > 0 when states map to (x, y) cells
    double gamma_;
    EnvDescriptor desc_;
    std::vector<double> table_;
};

/// One application of the soft Bellman backup T with an allowed-action
/// mask: (TQ)(s,a) = r(s,a) + gamma * logsumexp_{a' allowed} Q(next, a').
/// Throws InfeasibilityError naming the state when the mask empties a state.
TabularQ soft_backup(const TabularQ& q, const TabularDyn& dyn, const RewardTable& reward,
                     const Mask& allowed);

struct SoftViResult {
    TabularQ q;
    long iterations = 0;
    double residual = 0.0;
};

/// Iterates soft_backup until ||TQ - Q||_inf <= tol. Caps iterations and
/// raises RuntimeAbort on divergence.
SoftViResult soft_value_iteration(const TabularDyn& dyn, const RewardTable& reward,
                                  const Mask& allowed, double gamma, double tol,
                                  long max_iterations = 1'000'000);

// ---------------------------------------------------------------------------
// Parametric representations and TD learning
// ---------------------------------------------------------------------------

class TrainableQ;

/// Computes the bootstrap value of a next state on the target side of a
/// trainable Q: exact masked log-sum-exp over a finite action set, or a
/// self-normalized importance estimate from proposal candidates.
class ValueEstimator {
public:
    /// Exact mode over a finite action set.
    ValueEstimator(std::vector<ActionVec> action_set, const ActionFilter* filter = nullptr);
    /// Sampled mode with `n_candidates` proposal draws.
    ValueEstimator(std::shared_ptr<const ProposalSampler> proposal, int n_candidates,
                   const ActionFilter* filter = nullptr);

    double target_value(const TrainableQ& q, const StateVec& next, Rng& rng) const;
    double online_value(const SoftQ& q, const StateVec& state, Rng& rng) const;

    const ActionFilter* filter() const { return filter_; }

private:
    template <typename EvalFn>
    double estimate(EvalFn&& eval, const StateVec& state, Rng& rng) const;
    std::vector<ActionVec> action_set_;
    std::shared_ptr<const ProposalSampler> proposal_;
    int n_candidates_ = 0;
    const ActionFilter* filter_ = nullptr;
};

struct TdBatchOptions {
    int subtask = 1; // 1-based reward component to regress on
    std::function<double(const Transition&)> reward_fn; // overrides subtask when set
};

/// Parametric soft Q with online and target parameters. `value` and
/// `values` evaluate the online side.
class TrainableQ : public SoftQ {
public:
    virtual double value_target(const StateVec& state, const ActionVec& action) const = 0;
    virtual void values_target(const StateVec& state, std::span<const ActionVec> actions,
                               std::span<double> out) const;

    /// One mean-gradient step on the squared TD residual
    /// Q(s,a) - (r + gamma * V_target(s')). Returns the pre-step mean loss;
    /// the target parameters are untouched. Throws RuntimeAbort carrying the
    /// offending transition if a residual is non-finite.
    virtual double td_update(std::span<const Transition> batch, const ValueEstimator& estimator,
                             double learn_rate, Rng& rng, const TdBatchOptions& opt = {}) = 0;

    /// target <- tau * online + (1 - tau) * target, elementwise.
    virtual void polyak_update(double tau) = 0;
};

/// Bilinear grid over a 2-D state box with a fixed angular action
/// discretization. Linear in its parameters, which keeps TD learning on it
/// a plain quadratic problem.
class GridQ : public TrainableQ {
public:
    GridQ(const EnvDescriptor& desc, int nx, int ny, int n_bins, double gamma);

    const EnvDescriptor& descriptor() const override { return desc_; }
    double gamma() const override { return gamma_; }
    double value(const StateVec& state, const ActionVec& action) const override;
    void values(const StateVec& state, std::span<const ActionVec> actions,
                std::span<double> out) const override;
    std::string kind() const override { return "grid"; }
    std::unique_ptr<SoftQ> clone() const override { return std::make_unique<GridQ>(*this); }

    double value_target(const StateVec& state, const ActionVec& action) const override;
    void values_target(const StateVec& state, std::span<const ActionVec> actions,
                       std::span<double> out) const override;

    double td_update(std::span<const Transition> batch, const ValueEstimator& estimator,
                     double learn_rate, Rng& rng, const TdBatchOptions& opt = {}) override;
    void polyak_update(double tau) override;

    /// All bin values at a state (one interpolation, n_bins gathers).
    void bin_values(const StateVec& state, std::span<double> out) const;
    void bin_values_target(const StateVec& state, std::span<double> out) const;

    const std::vector<ActionVec>& bin_actions() const { return bins_; }
    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int n_bins() const { return n_bins_; }
    double node(int ix, int iy, int bin) const;
    double& node(int ix, int iy, int bin);

private:
    friend class SnapshotCodec;
    struct StateW {
        int base[4];
        double w[4];
    };
    StateW state_weights(const StateVec& state) const;
    void row(const std::vector<double>& params, const StateVec& state, std::span<double> out) const;
    double value_from(const std::vector<double>& params, const StateVec& state,
                      const ActionVec& action) const;
    bool is_native_bin_set(std::span<const ActionVec> actions) const;

    EnvDescriptor desc_;
    int nx_, ny_, n_bins_;
    double gamma_;
    std::vector<double> online_;
    std::vector<double> target_;
    std::vector<ActionVec> bins_;
};

/// Small fully-connected Q-network on concat(state, action), tanh hidden
/// layers, linear output; plain SGD with manually derived gradients.
class MlpQ : public TrainableQ {
public:
    MlpQ(const EnvDescriptor& desc, std::vector<int> hidden, double gamma, Rng& init_rng);

    const EnvDescriptor& descriptor() const override { return desc_; }
    double gamma() const override { return gamma_; }
    double value(const StateVec& state, const ActionVec& action) const override;
    std::string kind() const override { return "mlp"; }
    std::unique_ptr<SoftQ> clone() const override { return std::make_unique<MlpQ>(*this); }

    double value_target(const StateVec& state, const ActionVec& action) const override;

    double td_update(std::span<const Transition> batch, const ValueEstimator& estimator,
                     double learn_rate, Rng& rng, const TdBatchOptions& opt = {}) override;
    void polyak_update(double tau) override;

    const std::vector<int>& layer_sizes() const { return sizes_; }
    std::vector<double>& parameters() { return params_; }
    const std::vector<double>& parameters() const { return params_; }
    const std::vector<double>& target_parameters() const { return target_; }

    /// Analytic gradient of Q(s,a) with respect to every parameter; used by
    /// the finite-difference checks.
    void value_gradient(const StateVec& state, const ActionVec& action,
                        std::span<double> grad_out) const;

private:
    friend class SnapshotCodec;
    double forward(const std::vector<double>& params, std::span<const double> input,
                   std::vector<std::vector<double>>* activations) const;
    void concat_input(const StateVec& s, const ActionVec& a, std::vector<double>& out) const;
    void accumulate_gradient(const std::vector<std::vector<double>>& activations,
                             std::span<const double> input, double upstream,
                             std::vector<double>& grad) const;

    EnvDescriptor desc_;
    std::vector<int> sizes_; // input, hidden..., 1
    double gamma_;
    std::vector<double> params_;
    std::vector<double> target_;
};

/// Free-function forms of the update operations.
double td_update(TrainableQ& q, std::span<const Transition> batch, const ValueEstimator& estimator,
                 double learn_rate, Rng& rng, const TdBatchOptions& opt = {});
void polyak_update(TrainableQ& q, double tau);

} // namespace psqd
