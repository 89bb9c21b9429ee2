#pragma once

#include "psqd/env.hpp"
#include "psqd/lexi.hpp"
#include "psqd/softq.hpp"

#include <memory>
#include <string>
#include <vector>

namespace psqd {

/// FIFO transition store. All transitions share one descriptor; pushing a
/// transition with a mismatched reward length is a contract violation.
class ReplayBuffer {
public:
    ReplayBuffer(EnvDescriptor desc, std::size_t capacity, int source_subtask = 0);

    void push(Transition t);
    std::size_t size() const { return full_ ? capacity_ : next_; }
    std::size_t capacity() const { return capacity_; }

    /// Oldest-first access.
    const Transition& at(std::size_t i) const;
    const Transition& sample(Rng& rng) const;

    const EnvDescriptor& descriptor() const { return desc_; }
    int source_subtask() const { return source_subtask_; }

private:
    EnvDescriptor desc_;
    std::size_t capacity_;
    int source_subtask_;
    std::vector<Transition> data_;
    std::size_t next_ = 0;
    bool full_ = false;
};

/// Versioned binary buffer file: magic "PSQDBUF1", descriptor header,
/// little-endian fixed-width transition records.
void save_buffer(const ReplayBuffer& buffer, const std::string& path);
ReplayBuffer load_buffer(const std::string& path);

/// Keeps exactly the transitions whose action passes every constraint at
/// its state; order preserved. An empty result is reported on stderr (the
/// offline adaptation it feeds would be data-starved) but is not an error.
ReplayBuffer filter_buffer(const ReplayBuffer& buffer, const ConstraintStack& stack);

struct TrainConfig {
    long steps = 30000;
    int batch = 256;
    double learn_rate = 0.0; // 0 = representation default
    double tau = 0.01;
    double gamma = 0.99;
    long eval_interval = 1000;
    int eval_episodes = 5;
    std::uint64_t seed = 1;
    std::size_t buffer_capacity = 1'000'000;
    long min_buffer = 1000;
    int update_every = 1;
    int value_candidates = 64; // sampled estimator candidates (MLP path)
    int arbiter_batch = 256;
    int rejection_cap = 4096;

    // Representation sizes.
    int grid_nx = 128;
    int grid_ny = 128;
    int grid_bins = 64;
    std::vector<int> mlp_hidden = {64, 64};

    void validate() const;
    double resolved_learn_rate(const std::string& q_kind) const;
};

struct IntervalRecord {
    long step = 0;
    std::vector<double> returns; // per-subtask mean eval return
    double loss = 0.0;           // mean TD loss since the previous record
    long violations = 0;         // cumulative emitted-action indicator violations
    long collisions = 0;         // cumulative steps ending inside the forbidden region
};

struct TrainReport {
    std::vector<IntervalRecord> rows;
    long total_violations = 0;
    long total_collisions = 0;
    long env_steps = 0;
    double wall_time_s = 0.0;

    /// CSV schema: step, return_1..return_n, loss, violations, collisions.
    std::string csv(int subtask_count) const;
};

struct PretrainResult {
    std::unique_ptr<SoftQ> q;
    ReplayBuffer buffer;
    TrainReport report;
};

/// Soft Q-learning on one scalar subtask reward with unconstrained
/// Boltzmann action selection. The representation follows the environment:
/// tabular for discrete grids, bilinear grid for the 2-D world, MLP
/// otherwise. The buffer stores the full reward vector of every transition.
PretrainResult pretrain_subtask(const Env& env, int subtask, const TrainConfig& cfg);

enum class AdaptMode { Online, Offline };

struct AdaptResult {
    std::unique_ptr<SoftQ> q;
    TrainReport report;
};

/// Adapts a pretrained low-priority Q to the composed task: actions come
/// from the arbiter policy (online mode) or from the constraint-filtered
/// buffer (offline mode, zero environment interaction), and bootstrap
/// values are restricted to the global indifference space. Requires all
/// higher-priority constraints to be already adapted, in priority order.
AdaptResult adapt_subtask(const Env& env, const ConstraintStack& stack, int subtask,
                          const SoftQ& pretrained, const ReplayBuffer& buffer,
                          const TrainConfig& cfg, AdaptMode mode);

struct EvalOptions {
    int goal_subtask = 0; // 0 = lowest-priority subtask of the environment
    const ConstraintStack* check_stack = nullptr; // independent recheck of emitted actions
    int parallel = 1;
};

struct EpisodeStats {
    StateVec start;
    std::vector<double> returns;
    std::vector<int> first_hit; // per subtask, first step whose state hits the goal; -1 if never
    bool goal_reached = false;
    long violations = 0;
    long collisions = 0;
};

struct EvalReport {
    std::vector<EpisodeStats> episodes;
    std::vector<double> mean_returns;
    double goal_reach_fraction = 0.0;
    long violations = 0;
    long collisions = 0;
};

/// Deterministic given the seed: episode e uses an RNG seeded with
/// seed XOR e, independent of the number of worker threads.
EvalReport evaluate(const Env& env, const Policy& policy, int episodes, std::uint64_t seed,
                    const EvalOptions& options = {});

/// Default proposal mixture for arbiter sampling over a finite action set:
/// half the mass on the higher-priority subtask samplers, a quarter on the
/// current subtask sampler, a quarter uniform.
std::shared_ptr<const ProposalSampler> make_arbiter_proposal(
    const ConstraintStack& stack, std::shared_ptr<const SoftQ> current,
    const std::vector<ActionVec>& action_set);

} // namespace psqd
