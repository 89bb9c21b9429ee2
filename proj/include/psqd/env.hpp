#pragma once

#include "psqd/math.hpp"

#include <memory>
#include <utility>
#include <vector>

namespace psqd {

using StateVec = std::vector<double>;
using ActionVec = std::vector<double>;
using RewardVec = std::vector<double>;

enum class ActionKind : std::uint8_t {
    ContinuousUnitNorm = 0, // actions are unit-norm displacement vectors
    DiscreteSet = 1,        // actions are {index} into a fixed move set
};

/// Static description of an environment: shapes, bounds, episode length.
/// Subtasks are numbered 1..subtask_count, 1 being the highest priority.
struct EnvDescriptor {
    int state_dim = 0;
    int action_dim = 0;
    int subtask_count = 0;
    ActionKind action_kind = ActionKind::ContinuousUnitNorm;
    int horizon = 1;
    int discrete_actions = 0; // only meaningful for DiscreteSet
    std::vector<double> bounds_lo;
    std::vector<double> bounds_hi;

    bool operator==(const EnvDescriptor&) const = default;
    void validate() const;
};

struct Transition {
    StateVec state;
    ActionVec action;
    RewardVec reward;
    StateVec next_state;
    bool done = false;
};

struct StepResult {
    StateVec next;
    RewardVec reward;
    bool done = false;
};

/// Environments are immutable descriptors plus pure step functions over
/// explicit state; instances are safe to share across threads.
class Env {
public:
    virtual ~Env() = default;

    virtual const EnvDescriptor& descriptor() const = 0;

    /// Applies one action. `t` is the zero-based step index within the
    /// episode; `done` is set after `horizon` steps. Rewards are evaluated
    /// at the next state.
    virtual StepResult step(const StateVec& state, const ActionVec& action, int t = 0) const = 0;

    /// Scalar reward of one subtask (1-based) at a state.
    virtual double reward(int subtask, const StateVec& state) const = 0;

    virtual StateVec sample_start(Rng& rng) const = 0;

    /// True when the state is inside the environment's forbidden region
    /// (obstacle, box). Used for collision accounting in reports.
    virtual bool collision(const StateVec&) const { return false; }

    /// True when the state satisfies the goal predicate of a subtask.
    virtual bool goal_hit(int /*subtask*/, const StateVec&) const { return false; }

    RewardVec reward_all(const StateVec& state) const;

protected:
    bool in_episode_end(int t) const;
};

/// Axis-aligned rectangle, used for the navigation obstacle geometry.
struct Rect {
    double x0, y0, x1, y1;
};

/// The continuous 2D navigation world: position in [-bound, bound]^2,
/// unit-norm displacement actions, and three subtask rewards (obstacle
/// proximity/collision, reach-the-top, reach-the-right).
struct Nav2dConfig {
    double bound = 10.0;
    std::vector<Rect> obstacle; // empty -> default cap shape
    double sigma = 1.0;         // squared-exponential amplitude
    double length_scale = 1.0;
    double beta = 10.0;         // collision punishment
    double delta = 5.0;         // off-goal penalty for subtasks 2 and 3
    double step_scale = 0.5;
    int horizon = 100;
    double goal_y = 7.0;
    double goal_x = 7.0;
    double start_margin = 0.5;  // minimum obstacle distance of sampled starts
};

/// Default obstacle: two vertical legs at x = +-3 (width 1, y in [-2,4])
/// and a top bar (x in [-3.5,3.5], y in [3,4]).
std::vector<Rect> default_cap_obstacle();

class Nav2dEnv : public Env {
public:
    explicit Nav2dEnv(Nav2dConfig cfg = {});

    const EnvDescriptor& descriptor() const override { return desc_; }
    StepResult step(const StateVec& state, const ActionVec& action, int t = 0) const override;
    double reward(int subtask, const StateVec& state) const override;
    StateVec sample_start(Rng& rng) const override;
    bool collision(const StateVec& state) const override;
    bool goal_hit(int subtask, const StateVec& state) const override;

    /// Signed distance to the obstacle union boundary; negative inside.
    double obstacle_distance(const StateVec& state) const;

    const Nav2dConfig& config() const { return cfg_; }

private:
    Nav2dConfig cfg_;
    EnvDescriptor desc_;
};

/// Deterministic four-move gridworld with the same reward constants as the
/// navigation world (-11 on entering an obstacle cell, -5 per step off
/// goal), so epsilon thresholds transfer between the two.
struct GridworldConfig {
    int width = 5;
    int height = 5;
    std::vector<std::pair<int, int>> obstacles;
    std::vector<std::pair<int, int>> goals;
    int horizon = 50;
};

class Gridworld : public Env {
public:
    explicit Gridworld(GridworldConfig cfg);

    const EnvDescriptor& descriptor() const override { return desc_; }
    StepResult step(const StateVec& state, const ActionVec& action, int t = 0) const override;
    double reward(int subtask, const StateVec& state) const override;
    StateVec sample_start(Rng& rng) const override;
    bool collision(const StateVec& state) const override;
    bool goal_hit(int subtask, const StateVec& state) const override;

    int n_states() const { return cfg_.width * cfg_.height; }
    static constexpr int n_actions() { return 4; }

    int index_of(int x, int y) const { return y * cfg_.width + x; }
    int index_of(const StateVec& s) const;
    StateVec state_of(int index) const;

    /// Deterministic successor state index (moves off the grid stay put).
    int next_index(int state, int action) const;

    /// Reward of `subtask` for taking `action` in `state` (evaluated at the
    /// successor, mirroring the continuous environment).
    double reward_sa(int subtask, int state, int action) const;

    bool is_obstacle(int index) const { return obstacle_[index] != 0; }
    bool is_goal(int index) const { return goal_[index] != 0; }

    const GridworldConfig& config() const { return cfg_; }

    /// The four moves as {index} action vectors, in fixed order
    /// (+y, +x, -y, -x).
    static std::vector<ActionVec> action_set();

private:
    GridworldConfig cfg_;
    EnvDescriptor desc_;
    std::vector<char> obstacle_;
    std::vector<char> goal_;
};

/// Point mass in [-1,1]^d with unit-norm displacement actions. Subtask 1
/// penalizes entering a fixed axis-aligned box (first min(d,3) coordinates
/// in [0.25, 0.75]); subtask 2 is negative distance to the target at -0.5
/// in every coordinate. Stress substrate for sampling in higher dimensions.
struct HighDimConfig {
    int dim = 9;
    double step_scale = 0.2;
    int horizon = 60;
    double box_lo = 0.25;
    double box_hi = 0.75;
    double box_penalty = 10.0;
    double goal_radius = 0.1;
};

class HighDimPointEnv : public Env {
public:
    explicit HighDimPointEnv(HighDimConfig cfg);

    const EnvDescriptor& descriptor() const override { return desc_; }
    StepResult step(const StateVec& state, const ActionVec& action, int t = 0) const override;
    double reward(int subtask, const StateVec& state) const override;
    StateVec sample_start(Rng& rng) const override;
    bool collision(const StateVec& state) const override;
    bool goal_hit(int subtask, const StateVec& state) const override;

    bool inside_box(const StateVec& state) const;
    const HighDimConfig& config() const { return cfg_; }
    const StateVec& target() const { return target_; }

private:
    HighDimConfig cfg_;
    EnvDescriptor desc_;
    StateVec target_;
    int box_dims_ = 0;
};

} // namespace psqd
