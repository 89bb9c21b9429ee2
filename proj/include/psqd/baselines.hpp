#pragma once

#include "psqd/train.hpp"

#include <memory>
#include <vector>

namespace psqd {

/// Additive composition of frozen Q snapshots (no constraint enforcement).
class SumQ : public SoftQ {
public:
    explicit SumQ(std::vector<std::shared_ptr<const SoftQ>> components);

    const EnvDescriptor& descriptor() const override;
    double gamma() const override;
    double value(const StateVec& state, const ActionVec& action) const override;
    void values(const StateVec& state, std::span<const ActionVec> actions,
                std::span<double> out) const override;
    std::string kind() const override { return "sum"; }
    std::unique_ptr<SoftQ> clone() const override { return std::make_unique<SumQ>(*this); }

private:
    std::vector<std::shared_ptr<const SoftQ>> components_;
};

/// Summed-Q Boltzmann baseline; throws DomainError on descriptor mismatch.
std::shared_ptr<const SumQ> sql_comp_compose(std::vector<std::shared_ptr<const SoftQ>> qs);

struct SqdTabularResult {
    std::vector<TabularQ> qs;
    long sweeps = 0;
    double residual = 0.0;
};

/// Exact tabular soft Q-decomposition: every subtask Q is evaluated under
/// the sum-arbiter policy (Boltzmann in the summed Q). The per-state entropy
/// bonus enters the decomposed recursion once in total (split evenly across
/// subtasks), so the summed fixed point solves the scalarized-sum task.
SqdTabularResult sqd_tabular(const TabularDyn& dyn, const std::vector<RewardTable>& rewards,
                             double gamma, double tol, long max_sweeps = 100000);

SqdTabularResult sqd_tabular(const Gridworld& env, double gamma, double tol,
                             const std::vector<int>& subtasks = {});

struct SqdTrainResult {
    std::vector<std::unique_ptr<SoftQ>> qs;
    TrainReport report;
};

/// TD soft Q-decomposition for the continuous 2-D world: behavior and
/// next-state value proposals come from the sum-arbiter, so subtask values
/// are on-arbiter-policy estimates rather than greedy subtask softmaxes.
SqdTrainResult sqd_train(const Env& env, const TrainConfig& cfg);

struct PenaltyTrainResult {
    std::unique_ptr<SoftQ> q;
    TrainReport report;
};

/// Ablation: plain unconstrained SQL on the low-priority reward minus
/// `penalty` whenever the taken action violates any constraint indicator.
PenaltyTrainResult penalty_ablation_train(const Env& env, const ConstraintStack& stack,
                                          double penalty, int subtask, const TrainConfig& cfg);

struct OracleQuery {
    bool reachable = false;
    int steps = -1;            // minimum steps to the goal region
    double optimal_return = 0; // undiscounted, horizon-capped
};

/// Exact shortest-path oracle on a discretized MDP with obstacle states
/// removed. Gives the optimal undiscounted goal-subtask return and a
/// reachability bound for comparisons.
class GridOracle {
public:
    static GridOracle for_nav2d(const Nav2dEnv& env, int resolution, int n_bins,
                                int goal_subtask);
    static GridOracle for_gridworld(const Gridworld& env);

    OracleQuery query(const StateVec& start) const;
    double reach_fraction(std::span<const StateVec> starts) const;

private:
    GridOracle() = default;
    int cell_of(const StateVec& state) const;

    int res_x_ = 0, res_y_ = 0;
    std::vector<double> lo_, hi_;
    std::vector<int> steps_;  // -1 = unreachable / removed
    double step_penalty_ = 5.0;
    int horizon_ = 0;
    bool continuous_ = false;
};

} // namespace psqd
