#include "psqd/baselines.hpp"

#include "psqd/config.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

namespace psqd {

namespace {

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::shared_ptr<const SoftQ> alias(const SoftQ& q) {
    return {std::shared_ptr<const SoftQ>(), &q};
}

} // namespace

SumQ::SumQ(std::vector<std::shared_ptr<const SoftQ>> components)
    : components_(std::move(components)) {
    if (components_.empty()) throw DomainError("SumQ: need at least one component");
    for (const auto& c : components_) {
        if (!c) throw DomainError("SumQ: null component");
        if (!(c->descriptor() == components_.front()->descriptor()))
            throw DomainError("SumQ: component descriptors do not match");
    }
}

const EnvDescriptor& SumQ::descriptor() const {
    return components_.front()->descriptor();
}

double SumQ::gamma() const {
    return components_.front()->gamma();
}

double SumQ::value(const StateVec& state, const ActionVec& action) const {
    double acc = 0.0;
    for (const auto& c : components_) acc += c->value(state, action);
    return acc;
}

void SumQ::values(const StateVec& state, std::span<const ActionVec> actions,
                  std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    std::vector<double> part(actions.size());
    for (const auto& c : components_) {
        c->values(state, actions, part);
        for (std::size_t i = 0; i < actions.size(); ++i) out[i] += part[i];
    }
}

std::shared_ptr<const SumQ> sql_comp_compose(std::vector<std::shared_ptr<const SoftQ>> qs) {
    return std::make_shared<SumQ>(std::move(qs));
}

// --- tabular SQD -------------------------------------------------------

SqdTabularResult sqd_tabular(const TabularDyn& dyn, const std::vector<RewardTable>& rewards,
                             double gamma, double tol, long max_sweeps) {
    if (rewards.empty()) throw DomainError("sqd_tabular: need at least one subtask");
    const int n = static_cast<int>(rewards.size());
    const int S = dyn.n_states;
    const int A = dyn.n_actions;
    for (const auto& r : rewards)
        if (r.size() != static_cast<std::size_t>(S) * A)
            throw DomainError("sqd_tabular: reward table shape mismatch");

    SqdTabularResult result;
    result.qs.assign(n, TabularQ(S, A, gamma));

    std::vector<double> pi(A);
    std::vector<double> v(static_cast<std::size_t>(S) * n);
    for (long sweep = 1; sweep <= max_sweeps; ++sweep) {
        // Sum-arbiter policy and per-subtask on-policy state values from the
        // current iterates (Jacobi-style, all subtasks advance together).
        for (int s = 0; s < S; ++s) {
            double m = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < A; ++a) {
                double sum = 0.0;
                for (int i = 0; i < n; ++i) sum += result.qs[i].at(s, a);
                pi[a] = sum;
                m = std::max(m, sum);
            }
            double z = 0.0;
            for (int a = 0; a < A; ++a) {
                pi[a] = std::exp(pi[a] - m);
                z += pi[a];
            }
            double entropy = 0.0;
            for (int a = 0; a < A; ++a) {
                pi[a] /= z;
                if (pi[a] > 0.0) entropy -= pi[a] * std::log(pi[a]);
            }
            for (int i = 0; i < n; ++i) {
                double ev = 0.0;
                for (int a = 0; a < A; ++a) ev += pi[a] * result.qs[i].at(s, a);
                v[static_cast<std::size_t>(s) * n + i] = ev + entropy / n;
            }
        }
        double resid = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int s = 0; s < S; ++s) {
                for (int a = 0; a < A; ++a) {
                    const double target = rewards[i][static_cast<std::size_t>(s) * A + a] +
                                          gamma * v[static_cast<std::size_t>(dyn.next_of(s, a)) * n + i];
                    resid = std::max(resid, std::abs(target - result.qs[i].at(s, a)));
                    result.qs[i].at(s, a) = target;
                }
            }
        }
        result.sweeps = sweep;
        result.residual = resid;
        if (resid <= tol) return result;
    }
    throw RuntimeAbort("sqd_tabular: no convergence within " + std::to_string(max_sweeps) +
                       " sweeps");
}

SqdTabularResult sqd_tabular(const Gridworld& env, double gamma, double tol,
                             const std::vector<int>& subtasks) {
    std::vector<int> subs = subtasks;
    if (subs.empty())
        for (int i = 1; i <= env.descriptor().subtask_count; ++i) subs.push_back(i);
    const int A = Gridworld::n_actions();
    std::vector<RewardTable> rewards;
    for (int subtask : subs) {
        RewardTable r(static_cast<std::size_t>(env.n_states()) * A);
        for (int s = 0; s < env.n_states(); ++s)
            for (int a = 0; a < A; ++a)
                r[static_cast<std::size_t>(s) * A + a] = env.reward_sa(subtask, s, a);
        rewards.push_back(std::move(r));
    }
    return sqd_tabular(TabularDyn::from(env), rewards, gamma, tol);
}

// --- TD SQD ------------------------------------------------------------

SqdTrainResult sqd_train(const Env& env, const TrainConfig& cfg) {
    cfg.validate();
    const auto& desc = env.descriptor();
    if (desc.subtask_count < 1) throw ConfigError("sqd_train: environment has no subtasks");
    if (!(desc.action_kind == ActionKind::ContinuousUnitNorm && desc.state_dim == 2))
        throw ConfigError("sqd_train: TD variant supports the 2-D navigation substrate; use "
                          "sqd_tabular for grids");

    const double start_time = now_seconds();
    const int n = desc.subtask_count;
    std::vector<std::unique_ptr<GridQ>> qs;
    for (int i = 0; i < n; ++i)
        qs.push_back(std::make_unique<GridQ>(desc, cfg.grid_nx, cfg.grid_ny, cfg.grid_bins,
                                             cfg.gamma));
    const auto bins = qs.front()->bin_actions();

    std::vector<std::shared_ptr<const SoftQ>> aliases;
    for (const auto& q : qs) aliases.push_back(alias(*q));
    auto sum = std::make_shared<SumQ>(aliases);
    BoltzmannSetPolicy behavior(sum, bins);
    // Next-state values are importance estimates with the sum-arbiter as
    // proposal, which is what removes the illusion of control.
    auto arbiter_proposal = std::make_shared<BoltzmannSetProposal>(sum, bins);
    ValueEstimator estimator(arbiter_proposal, cfg.value_candidates);

    const double lr = cfg.resolved_learn_rate("grid");
    Rng rng = Rng(cfg.seed).fork(3);
    ReplayBuffer buffer(desc, cfg.buffer_capacity, 0);
    SqdTrainResult result;
    TrainReport& report = result.report;
    double loss_sum = 0.0;
    long loss_count = 0;
    std::vector<Transition> batch;
    StateVec state = env.sample_start(rng);
    int t = 0;
    const long warmup = std::max<long>(cfg.min_buffer, cfg.batch);
    for (long step = 1; step <= cfg.steps; ++step) {
        const ActionVec a = behavior.act(state, rng);
        StepResult sr = env.step(state, a, t);
        buffer.push({state, a, sr.reward, sr.next, sr.done});
        if (env.collision(sr.next)) ++report.total_collisions;
        ++report.env_steps;
        if (buffer.size() >= static_cast<std::size_t>(warmup) && step % cfg.update_every == 0) {
            batch.resize(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) batch[i] = buffer.sample(rng);
            for (int i = 0; i < n; ++i) {
                TdBatchOptions opt;
                opt.subtask = i + 1;
                loss_sum += qs[i]->td_update(batch, estimator, lr, rng, opt);
                ++loss_count;
                qs[i]->polyak_update(cfg.tau);
            }
        }
        if (sr.done) {
            state = env.sample_start(rng);
            t = 0;
        } else {
            state = std::move(sr.next);
            ++t;
        }
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            IntervalRecord row;
            row.step = step;
            row.loss = loss_count ? loss_sum / loss_count : 0.0;
            loss_sum = 0.0;
            loss_count = 0;
            row.violations = report.total_violations;
            row.collisions = report.total_collisions;
            if (cfg.eval_episodes > 0) {
                const std::uint64_t eval_seed =
                    cfg.seed ^ (0xE5A1ull + 7919ull * static_cast<std::uint64_t>(report.rows.size()));
                row.returns = evaluate(env, behavior, cfg.eval_episodes, eval_seed).mean_returns;
            }
            report.rows.push_back(std::move(row));
            if (step == cfg.steps) break;
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    for (auto& q : qs) result.qs.push_back(q->clone());
    return result;
}

// --- penalty ablation --------------------------------------------------

PenaltyTrainResult penalty_ablation_train(const Env& env, const ConstraintStack& stack,
                                          double penalty, int subtask, const TrainConfig& cfg) {
    cfg.validate();
    if (penalty < 0.0) throw ConfigError("penalty_ablation: penalty must be >= 0");
    const auto& desc = env.descriptor();
    if (!(desc.action_kind == ActionKind::ContinuousUnitNorm && desc.state_dim == 2))
        throw ConfigError("penalty_ablation: supported on the 2-D navigation substrate");

    const double start_time = now_seconds();
    auto q = std::make_unique<GridQ>(desc, cfg.grid_nx, cfg.grid_ny, cfg.grid_bins, cfg.gamma);
    const auto bins = q->bin_actions();
    BoltzmannSetPolicy explore(alias(*q), bins);
    ValueEstimator estimator(bins); // unconstrained bootstrap
    TdBatchOptions opt;
    opt.subtask = subtask;
    opt.reward_fn = [&stack, subtask, penalty](const Transition& tr) {
        const double base = tr.reward.at(subtask - 1);
        return stack.permits(tr.state, tr.action) ? base : base - penalty;
    };

    const double lr = cfg.resolved_learn_rate("grid");
    // Same stream as plain pretraining: with a zero penalty the run is
    // bitwise-identical to SQL on the subtask reward.
    Rng rng = Rng(cfg.seed).fork(1);
    ReplayBuffer buffer(desc, cfg.buffer_capacity, subtask);
    PenaltyTrainResult result;
    TrainReport& report = result.report;
    double loss_sum = 0.0;
    long loss_count = 0;
    std::vector<Transition> batch;
    StateVec state = env.sample_start(rng);
    int t = 0;
    const long warmup = std::max<long>(cfg.min_buffer, cfg.batch);
    for (long step = 1; step <= cfg.steps; ++step) {
        const ActionVec a = explore.act(state, rng);
        if (!stack.permits(state, a)) ++report.total_violations;
        StepResult sr = env.step(state, a, t);
        buffer.push({state, a, sr.reward, sr.next, sr.done});
        if (env.collision(sr.next)) ++report.total_collisions;
        ++report.env_steps;
        if (buffer.size() >= static_cast<std::size_t>(warmup) && step % cfg.update_every == 0) {
            batch.resize(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) batch[i] = buffer.sample(rng);
            loss_sum += q->td_update(batch, estimator, lr, rng, opt);
            ++loss_count;
            q->polyak_update(cfg.tau);
        }
        if (sr.done) {
            state = env.sample_start(rng);
            t = 0;
        } else {
            state = std::move(sr.next);
            ++t;
        }
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            IntervalRecord row;
            row.step = step;
            row.loss = loss_count ? loss_sum / loss_count : 0.0;
            loss_sum = 0.0;
            loss_count = 0;
            row.violations = report.total_violations;
            row.collisions = report.total_collisions;
            if (cfg.eval_episodes > 0) {
                const std::uint64_t eval_seed =
                    cfg.seed ^ (0xE5A1ull + 7919ull * static_cast<std::uint64_t>(report.rows.size()));
                row.returns = evaluate(env, explore, cfg.eval_episodes, eval_seed).mean_returns;
            }
            report.rows.push_back(std::move(row));
            if (step == cfg.steps) break;
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    result.q = q->clone();
    return result;
}

// --- DP oracle ----------------------------------------------------------

GridOracle GridOracle::for_nav2d(const Nav2dEnv& env, int resolution, int n_bins,
                                 int goal_subtask) {
    if (resolution < 2) throw DomainError("GridOracle: resolution must be >= 2");
    GridOracle oracle;
    oracle.continuous_ = true;
    oracle.res_x_ = resolution;
    oracle.res_y_ = resolution;
    oracle.lo_ = env.descriptor().bounds_lo;
    oracle.hi_ = env.descriptor().bounds_hi;
    oracle.step_penalty_ = env.config().delta;
    oracle.horizon_ = env.config().horizon;

    const int n_cells = resolution * resolution;
    const double cw_x = (oracle.hi_[0] - oracle.lo_[0]) / resolution;
    const double cw_y = (oracle.hi_[1] - oracle.lo_[1]) / resolution;
    auto center = [&](int cell) {
        const int ix = cell % resolution;
        const int iy = cell / resolution;
        return StateVec{oracle.lo_[0] + (ix + 0.5) * cw_x, oracle.lo_[1] + (iy + 0.5) * cw_y};
    };

    std::vector<char> removed(n_cells, 0);
    std::vector<char> goal(n_cells, 0);
    for (int c = 0; c < n_cells; ++c) {
        const StateVec s = center(c);
        if (env.obstacle_distance(s) <= 0.0) removed[c] = 1;
        else if (env.goal_hit(goal_subtask, s)) goal[c] = 1;
    }

    const auto dirs = angular_action_bins(n_bins);
    const double step = env.config().step_scale;
    std::vector<std::vector<int>> rev(n_cells);
    for (int c = 0; c < n_cells; ++c) {
        if (removed[c]) continue;
        const StateVec s = center(c);
        for (const auto& d : dirs) {
            const double nx = std::clamp(s[0] + step * d[0], oracle.lo_[0], oracle.hi_[0]);
            const double ny = std::clamp(s[1] + step * d[1], oracle.lo_[1], oracle.hi_[1]);
            const int ix = std::min(static_cast<int>((nx - oracle.lo_[0]) / cw_x), resolution - 1);
            const int iy = std::min(static_cast<int>((ny - oracle.lo_[1]) / cw_y), resolution - 1);
            const int to = iy * resolution + ix;
            if (to == c || removed[to]) continue;
            rev[to].push_back(c);
        }
    }

    oracle.steps_.assign(n_cells, -1);
    std::deque<int> queue;
    for (int c = 0; c < n_cells; ++c) {
        if (goal[c] && !removed[c]) {
            oracle.steps_[c] = 0;
            queue.push_back(c);
        }
    }
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        for (int v : rev[u]) {
            if (oracle.steps_[v] < 0) {
                oracle.steps_[v] = oracle.steps_[u] + 1;
                queue.push_back(v);
            }
        }
    }
    return oracle;
}

GridOracle GridOracle::for_gridworld(const Gridworld& env) {
    GridOracle oracle;
    oracle.continuous_ = false;
    oracle.res_x_ = env.config().width;
    oracle.res_y_ = env.config().height;
    oracle.lo_ = {0.0, 0.0};
    oracle.hi_ = {static_cast<double>(oracle.res_x_ - 1), static_cast<double>(oracle.res_y_ - 1)};
    oracle.step_penalty_ = 5.0;
    oracle.horizon_ = env.descriptor().horizon;

    const int n_cells = env.n_states();
    oracle.steps_.assign(n_cells, -1);
    std::deque<int> queue;
    for (int c = 0; c < n_cells; ++c) {
        if (env.is_goal(c)) {
            oracle.steps_[c] = 0;
            queue.push_back(c);
        }
    }
    // Backward BFS over reversed moves; obstacle cells are removed.
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        const int ux = u % oracle.res_x_;
        const int uy = u / oracle.res_x_;
        constexpr int dx[4] = {0, 1, 0, -1};
        constexpr int dy[4] = {1, 0, -1, 0};
        for (int k = 0; k < 4; ++k) {
            const int vx = ux + dx[k];
            const int vy = uy + dy[k];
            if (vx < 0 || vx >= oracle.res_x_ || vy < 0 || vy >= oracle.res_y_) continue;
            const int v = vy * oracle.res_x_ + vx;
            if (env.is_obstacle(v) || oracle.steps_[v] >= 0) continue;
            oracle.steps_[v] = oracle.steps_[u] + 1;
            queue.push_back(v);
        }
    }
    return oracle;
}

int GridOracle::cell_of(const StateVec& state) const {
    if (!continuous_) {
        const int x = static_cast<int>(std::lround(state[0]));
        const int y = static_cast<int>(std::lround(state[1]));
        if (x < 0 || x >= res_x_ || y < 0 || y >= res_y_)
            throw DomainError("GridOracle: state out of range");
        return y * res_x_ + x;
    }
    const double cw_x = (hi_[0] - lo_[0]) / res_x_;
    const double cw_y = (hi_[1] - lo_[1]) / res_y_;
    const int ix = std::clamp(static_cast<int>((state[0] - lo_[0]) / cw_x), 0, res_x_ - 1);
    const int iy = std::clamp(static_cast<int>((state[1] - lo_[1]) / cw_y), 0, res_y_ - 1);
    return iy * res_x_ + ix;
}

OracleQuery GridOracle::query(const StateVec& start) const {
    OracleQuery q;
    q.steps = steps_[cell_of(start)];
    q.reachable = q.steps >= 0 && q.steps <= horizon_;
    q.optimal_return =
        q.reachable ? -step_penalty_ * q.steps : -step_penalty_ * horizon_;
    return q;
}

double GridOracle::reach_fraction(std::span<const StateVec> starts) const {
    if (starts.empty()) throw DomainError("GridOracle: no start states");
    long reached = 0;
    for (const auto& s : starts) reached += query(s).reachable ? 1 : 0;
    return static_cast<double>(reached) / static_cast<double>(starts.size());
}

} // namespace psqd
