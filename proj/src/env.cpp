#include "psqd/env.hpp"

#include <algorithm>
#include <cmath>

namespace psqd {

namespace {

double clip(double x, double lo, double hi) {
    return std::min(std::max(x, lo), hi);
}

// Signed distance to an axis-aligned rectangle; negative inside.
double rect_signed_distance(const Rect& r, double x, double y) {
    const double dx = std::max(r.x0 - x, x - r.x1);
    const double dy = std::max(r.y0 - y, y - r.y1);
    if (dx <= 0.0 && dy <= 0.0) return std::max(dx, dy);
    const double ox = std::max(dx, 0.0);
    const double oy = std::max(dy, 0.0);
    return std::hypot(ox, oy);
}

void require_unit_norm(const ActionVec& a) {
    if (std::abs(norm2(a) - 1.0) > 1e-9)
        throw DomainError("action must have unit Euclidean norm");
}

} // namespace

void EnvDescriptor::validate() const {
    if (state_dim < 1 || action_dim < 1) throw DomainError("descriptor: bad dimensions");
    if (subtask_count < 1) throw DomainError("descriptor: subtask_count must be >= 1");
    if (horizon < 1) throw DomainError("descriptor: horizon must be >= 1");
    if (bounds_lo.size() != static_cast<std::size_t>(state_dim) ||
        bounds_hi.size() != static_cast<std::size_t>(state_dim))
        throw DomainError("descriptor: bounds size mismatch");
    for (int i = 0; i < state_dim; ++i)
        if (!std::isfinite(bounds_lo[i]) || !std::isfinite(bounds_hi[i]) ||
            bounds_lo[i] >= bounds_hi[i])
            throw DomainError("descriptor: bounds must be finite and ordered");
}

RewardVec Env::reward_all(const StateVec& state) const {
    const int n = descriptor().subtask_count;
    RewardVec r(n);
    for (int i = 1; i <= n; ++i) r[i - 1] = reward(i, state);
    return r;
}

bool Env::in_episode_end(int t) const {
    return t + 1 >= descriptor().horizon;
}

std::vector<Rect> default_cap_obstacle() {
    return {
        {-3.5, -2.0, -2.5, 4.0}, // left leg
        {2.5, -2.0, 3.5, 4.0},   // right leg
        {-3.5, 3.0, 3.5, 4.0},   // top bar
    };
}

Nav2dEnv::Nav2dEnv(Nav2dConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.obstacle.empty()) cfg_.obstacle = default_cap_obstacle();
    for (const auto& r : cfg_.obstacle)
        if (!(r.x0 < r.x1) || !(r.y0 < r.y1))
            throw DomainError("nav2d: degenerate obstacle rectangle");
    if (cfg_.bound <= 0.0 || cfg_.step_scale <= 0.0)
        throw DomainError("nav2d: bound and step_scale must be positive");
    desc_.state_dim = 2;
    desc_.action_dim = 2;
    desc_.subtask_count = 3;
    desc_.action_kind = ActionKind::ContinuousUnitNorm;
    desc_.horizon = cfg_.horizon;
    desc_.bounds_lo = {-cfg_.bound, -cfg_.bound};
    desc_.bounds_hi = {cfg_.bound, cfg_.bound};
    desc_.validate();
}

double Nav2dEnv::obstacle_distance(const StateVec& s) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& r : cfg_.obstacle)
        d = std::min(d, rect_signed_distance(r, s[0], s[1]));
    return d;
}

double Nav2dEnv::reward(int subtask, const StateVec& s) const {
    switch (subtask) {
    case 1: {
        const double d = obstacle_distance(s);
        const double l = cfg_.length_scale;
        const double prox = cfg_.sigma * cfg_.sigma * std::exp(-(d * d) / (2.0 * l * l));
        return d > 0.0 ? -prox : -cfg_.beta - prox;
    }
    case 2:
        return s[1] > cfg_.goal_y ? 0.0 : -cfg_.delta;
    case 3:
        return s[0] > cfg_.goal_x ? 0.0 : -cfg_.delta;
    default:
        throw DomainError("nav2d: unknown subtask index " + std::to_string(subtask));
    }
}

StepResult Nav2dEnv::step(const StateVec& s, const ActionVec& a, int t) const {
    require_unit_norm(a);
    StateVec next = {
        clip(s[0] + cfg_.step_scale * a[0], -cfg_.bound, cfg_.bound),
        clip(s[1] + cfg_.step_scale * a[1], -cfg_.bound, cfg_.bound),
    };
    StepResult res;
    res.reward = reward_all(next);
    res.next = std::move(next);
    res.done = in_episode_end(t);
    return res;
}

StateVec Nav2dEnv::sample_start(Rng& rng) const {
    for (int tries = 0; tries < 10000; ++tries) {
        StateVec s = {rng.uniform(-cfg_.bound, cfg_.bound), rng.uniform(-cfg_.bound, cfg_.bound)};
        if (obstacle_distance(s) >= cfg_.start_margin) return s;
    }
    throw RuntimeAbort("nav2d: could not sample a start state outside the obstacle");
}

bool Nav2dEnv::collision(const StateVec& s) const {
    return obstacle_distance(s) <= 0.0;
}

bool Nav2dEnv::goal_hit(int subtask, const StateVec& s) const {
    if (subtask == 2) return s[1] > cfg_.goal_y;
    if (subtask == 3) return s[0] > cfg_.goal_x;
    return false;
}

Gridworld::Gridworld(GridworldConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.width < 2 || cfg_.height < 2)
        throw DomainError("gridworld: dimensions must be >= 2");
    obstacle_.assign(n_states(), 0);
    goal_.assign(n_states(), 0);
    auto check = [&](const std::pair<int, int>& c) {
        if (c.first < 0 || c.first >= cfg_.width || c.second < 0 || c.second >= cfg_.height)
            throw DomainError("gridworld: cell out of bounds");
    };
    for (const auto& c : cfg_.obstacles) {
        check(c);
        obstacle_[index_of(c.first, c.second)] = 1;
    }
    for (const auto& c : cfg_.goals) {
        check(c);
        if (obstacle_[index_of(c.first, c.second)])
            throw DomainError("gridworld: goal cell coincides with an obstacle");
        goal_[index_of(c.first, c.second)] = 1;
    }
    desc_.state_dim = 2;
    desc_.action_dim = 1;
    desc_.subtask_count = 2;
    desc_.action_kind = ActionKind::DiscreteSet;
    desc_.discrete_actions = 4;
    desc_.horizon = cfg_.horizon;
    desc_.bounds_lo = {0.0, 0.0};
    desc_.bounds_hi = {static_cast<double>(cfg_.width - 1), static_cast<double>(cfg_.height - 1)};
    desc_.validate();
}

int Gridworld::index_of(const StateVec& s) const {
    const int x = static_cast<int>(std::lround(s[0]));
    const int y = static_cast<int>(std::lround(s[1]));
    if (x < 0 || x >= cfg_.width || y < 0 || y >= cfg_.height)
        throw DomainError("gridworld: state out of bounds");
    return index_of(x, y);
}

StateVec Gridworld::state_of(int index) const {
    return {static_cast<double>(index % cfg_.width), static_cast<double>(index / cfg_.width)};
}

int Gridworld::next_index(int state, int action) const {
    static constexpr int dx[4] = {0, 1, 0, -1};
    static constexpr int dy[4] = {1, 0, -1, 0};
    if (action < 0 || action >= 4) throw DomainError("gridworld: bad action index");
    const int x = state % cfg_.width;
    const int y = state / cfg_.width;
    const int nx = x + dx[action];
    const int ny = y + dy[action];
    if (nx < 0 || nx >= cfg_.width || ny < 0 || ny >= cfg_.height) return state;
    return index_of(nx, ny);
}

double Gridworld::reward_sa(int subtask, int state, int action) const {
    const int next = next_index(state, action);
    if (subtask == 1) return obstacle_[next] ? -11.0 : 0.0;
    if (subtask == 2) return goal_[next] ? 0.0 : -5.0;
    throw DomainError("gridworld: unknown subtask index " + std::to_string(subtask));
}

double Gridworld::reward(int subtask, const StateVec& s) const {
    const int idx = index_of(s);
    if (subtask == 1) return obstacle_[idx] ? -11.0 : 0.0;
    if (subtask == 2) return goal_[idx] ? 0.0 : -5.0;
    throw DomainError("gridworld: unknown subtask index " + std::to_string(subtask));
}

StepResult Gridworld::step(const StateVec& s, const ActionVec& a, int t) const {
    if (a.size() != 1) throw DomainError("gridworld: action must be a single index");
    const int action = static_cast<int>(std::lround(a[0]));
    const int next = next_index(index_of(s), action);
    StepResult res;
    res.next = state_of(next);
    res.reward = reward_all(res.next);
    res.done = in_episode_end(t);
    return res;
}

StateVec Gridworld::sample_start(Rng& rng) const {
    for (int tries = 0; tries < 10000; ++tries) {
        const int idx = rng.uniform_int(n_states());
        if (!obstacle_[idx]) return state_of(idx);
    }
    throw RuntimeAbort("gridworld: no free cell to start from");
}

bool Gridworld::collision(const StateVec& s) const {
    return obstacle_[index_of(s)] != 0;
}

bool Gridworld::goal_hit(int subtask, const StateVec& s) const {
    return subtask == 2 && goal_[index_of(s)] != 0;
}

std::vector<ActionVec> Gridworld::action_set() {
    return {{0.0}, {1.0}, {2.0}, {3.0}};
}

HighDimPointEnv::HighDimPointEnv(HighDimConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.dim < 2 || cfg_.dim > 16)
        throw DomainError("highdim: dimension must be in [2, 16]");
    box_dims_ = std::min(cfg_.dim, 3);
    target_.assign(cfg_.dim, -0.5);
    desc_.state_dim = cfg_.dim;
    desc_.action_dim = cfg_.dim;
    desc_.subtask_count = 2;
    desc_.action_kind = ActionKind::ContinuousUnitNorm;
    desc_.horizon = cfg_.horizon;
    desc_.bounds_lo.assign(cfg_.dim, -1.0);
    desc_.bounds_hi.assign(cfg_.dim, 1.0);
    desc_.validate();
}

bool HighDimPointEnv::inside_box(const StateVec& s) const {
    for (int i = 0; i < box_dims_; ++i)
        if (s[i] < cfg_.box_lo || s[i] > cfg_.box_hi) return false;
    return true;
}

double HighDimPointEnv::reward(int subtask, const StateVec& s) const {
    if (subtask == 1) return inside_box(s) ? -cfg_.box_penalty : 0.0;
    if (subtask == 2) {
        double acc = 0.0;
        for (int i = 0; i < cfg_.dim; ++i) {
            const double d = s[i] - target_[i];
            acc += d * d;
        }
        return -std::sqrt(acc);
    }
    throw DomainError("highdim: unknown subtask index " + std::to_string(subtask));
}

StepResult HighDimPointEnv::step(const StateVec& s, const ActionVec& a, int t) const {
    require_unit_norm(a);
    StateVec next(cfg_.dim);
    for (int i = 0; i < cfg_.dim; ++i)
        next[i] = clip(s[i] + cfg_.step_scale * a[i], -1.0, 1.0);
    StepResult res;
    res.reward = reward_all(next);
    res.next = std::move(next);
    res.done = in_episode_end(t);
    return res;
}

StateVec HighDimPointEnv::sample_start(Rng& rng) const {
    for (int tries = 0; tries < 10000; ++tries) {
        StateVec s(cfg_.dim);
        for (auto& x : s) x = rng.uniform(-1.0, 1.0);
        if (!inside_box(s)) return s;
    }
    throw RuntimeAbort("highdim: could not sample a start outside the box");
}

bool HighDimPointEnv::collision(const StateVec& s) const {
    return inside_box(s);
}

bool HighDimPointEnv::goal_hit(int subtask, const StateVec& s) const {
    return subtask == 2 && -reward(2, s) < cfg_.goal_radius;
}

} // namespace psqd
