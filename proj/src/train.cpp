#include "psqd/train.hpp"

#include "psqd/config.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace psqd {

namespace {

constexpr char kBufferMagic[8] = {'P', 'S', 'Q', 'D', 'B', 'U', 'F', '1'};
constexpr std::uint32_t kBufferVersion = 1;

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

ReplayBuffer::ReplayBuffer(EnvDescriptor desc, std::size_t capacity, int source_subtask)
    : desc_(std::move(desc)), capacity_(capacity), source_subtask_(source_subtask) {
    if (capacity_ < 1) throw DomainError("ReplayBuffer: capacity must be >= 1");
    data_.reserve(std::min<std::size_t>(capacity_, 1 << 16));
}

void ReplayBuffer::push(Transition t) {
    if (t.reward.size() != static_cast<std::size_t>(desc_.subtask_count))
        throw DomainError("ReplayBuffer: reward length does not match the descriptor");
    if (t.state.size() != static_cast<std::size_t>(desc_.state_dim) ||
        t.next_state.size() != static_cast<std::size_t>(desc_.state_dim))
        throw DomainError("ReplayBuffer: state dimension does not match the descriptor");
    if (full_) {
        data_[next_] = std::move(t);
    } else {
        data_.push_back(std::move(t));
        if (data_.size() == capacity_) full_ = true;
    }
    next_ = (next_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
    if (i >= size()) throw DomainError("ReplayBuffer: index out of range");
    return full_ ? data_[(next_ + i) % capacity_] : data_[i];
}

const Transition& ReplayBuffer::sample(Rng& rng) const {
    if (size() == 0) throw DomainError("ReplayBuffer: cannot sample from an empty buffer");
    return at(static_cast<std::size_t>(rng.uniform_int(static_cast<int>(size()))));
}

void save_buffer(const ReplayBuffer& buffer, const std::string& path) {
    static_assert(std::endian::native == std::endian::little,
                  "buffer format assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeAbort("buffer: cannot open " + path + " for writing");
    auto put = [&](const void* p, std::size_t n) { out.write(static_cast<const char*>(p), n); };
    put(kBufferMagic, sizeof(kBufferMagic));
    put(&kBufferVersion, 4);
    const auto& d = buffer.descriptor();
    const std::int32_t dims[4] = {d.state_dim, d.action_dim, d.subtask_count, d.horizon};
    put(dims, sizeof(dims));
    const std::uint8_t kind = static_cast<std::uint8_t>(d.action_kind);
    put(&kind, 1);
    const std::int32_t discrete = d.discrete_actions;
    put(&discrete, 4);
    put(d.bounds_lo.data(), d.bounds_lo.size() * 8);
    put(d.bounds_hi.data(), d.bounds_hi.size() * 8);
    const std::int32_t source = buffer.source_subtask();
    put(&source, 4);
    const std::uint64_t count = buffer.size();
    put(&count, 8);
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const Transition& t = buffer.at(i);
        put(t.state.data(), t.state.size() * 8);
        put(t.action.data(), t.action.size() * 8);
        put(t.reward.data(), t.reward.size() * 8);
        put(t.next_state.data(), t.next_state.size() * 8);
        const std::uint8_t done = t.done ? 1 : 0;
        put(&done, 1);
    }
    if (!out) throw RuntimeAbort("buffer: write failed: " + path);
}

ReplayBuffer load_buffer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("buffer: cannot open " + path);
    std::size_t offset = 0;
    auto get = [&](void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw ConfigError(path + ": truncated at offset " + std::to_string(offset));
        offset += n;
    };
    char magic[8];
    get(magic, sizeof(magic));
    if (std::memcmp(magic, kBufferMagic, sizeof(kBufferMagic)) != 0)
        throw ConfigError(path + ": not a transition buffer (bad magic)");
    std::uint32_t version = 0;
    get(&version, 4);
    if (version != kBufferVersion)
        throw ConfigError(path + ": unsupported buffer version " + std::to_string(version));
    std::int32_t dims[4];
    get(dims, sizeof(dims));
    EnvDescriptor d;
    d.state_dim = dims[0];
    d.action_dim = dims[1];
    d.subtask_count = dims[2];
    d.horizon = dims[3];
    std::uint8_t kind = 0;
    get(&kind, 1);
    d.action_kind = static_cast<ActionKind>(kind);
    std::int32_t discrete = 0;
    get(&discrete, 4);
    d.discrete_actions = discrete;
    if (d.state_dim < 1 || d.state_dim > 1024 || d.action_dim < 1 || d.action_dim > 1024 ||
        d.subtask_count < 1 || d.subtask_count > 1024)
        throw ConfigError(path + ": corrupt descriptor at offset " + std::to_string(offset));
    d.bounds_lo.resize(d.state_dim);
    d.bounds_hi.resize(d.state_dim);
    get(d.bounds_lo.data(), d.bounds_lo.size() * 8);
    get(d.bounds_hi.data(), d.bounds_hi.size() * 8);
    std::int32_t source = 0;
    get(&source, 4);
    std::uint64_t count = 0;
    get(&count, 8);
    ReplayBuffer buffer(d, std::max<std::size_t>(count, 1), source);
    for (std::uint64_t i = 0; i < count; ++i) {
        Transition t;
        t.state.resize(d.state_dim);
        t.action.resize(d.action_dim);
        t.reward.resize(d.subtask_count);
        t.next_state.resize(d.state_dim);
        get(t.state.data(), t.state.size() * 8);
        get(t.action.data(), t.action.size() * 8);
        get(t.reward.data(), t.reward.size() * 8);
        get(t.next_state.data(), t.next_state.size() * 8);
        std::uint8_t done = 0;
        get(&done, 1);
        t.done = done != 0;
        buffer.push(std::move(t));
    }
    return buffer;
}

ReplayBuffer filter_buffer(const ReplayBuffer& buffer, const ConstraintStack& stack) {
    ReplayBuffer out(buffer.descriptor(), buffer.capacity(), buffer.source_subtask());
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const Transition& t = buffer.at(i);
        if (stack.permits(t.state, t.action)) out.push(t);
    }
    if (out.size() == 0 && buffer.size() > 0)
        std::cerr << "[psqd] warning: constraint filter removed every transition; offline "
                     "adaptation from this buffer would be data-starved\n";
    return out;
}

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("train.steps must be >= 1");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("train.tau must be in (0, 1]");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("train.gamma must be in [0, 1)");
    if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
    if (buffer_capacity < static_cast<std::size_t>(batch))
        throw ConfigError("train.buffer_capacity must hold at least one batch");
    if (value_candidates < 1) throw ConfigError("train.value_candidates must be >= 1");
}

double TrainConfig::resolved_learn_rate(const std::string& q_kind) const {
    if (learn_rate > 0.0) return learn_rate;
    if (q_kind == "grid") return 1.0;
    if (q_kind == "mlp") return 1e-3;
    return 1.0;
}

std::string TrainReport::csv(int subtask_count) const {
    std::ostringstream out;
    out << "step";
    for (int i = 1; i <= subtask_count; ++i) out << ",return_" << i;
    out << ",loss,violations,collisions\n";
    for (const auto& row : rows) {
        out << row.step;
        for (int i = 0; i < subtask_count; ++i) {
            out << ",";
            if (i < static_cast<int>(row.returns.size()) && std::isfinite(row.returns[i]))
                out << format_number(row.returns[i]);
            else
                out << "nan";
        }
        out << "," << format_number(row.loss) << "," << row.violations << "," << row.collisions
            << "\n";
    }
    return out.str();
}

// --- evaluation --------------------------------------------------------

namespace {

EpisodeStats run_episode(const Env& env, const Policy& policy, std::uint64_t episode_seed,
                         const EvalOptions& opts, int goal_subtask) {
    Rng rng(episode_seed);
    const auto& desc = env.descriptor();
    EpisodeStats stats;
    stats.returns.assign(desc.subtask_count, 0.0);
    stats.first_hit.assign(desc.subtask_count, -1);
    StateVec state = env.sample_start(rng);
    stats.start = state;
    for (int t = 0; t < desc.horizon; ++t) {
        const ActionVec a = policy.act(state, rng);
        if (opts.check_stack && !opts.check_stack->permits(state, a)) ++stats.violations;
        StepResult sr = env.step(state, a, t);
        for (int i = 0; i < desc.subtask_count; ++i) {
            stats.returns[i] += sr.reward[i];
            if (stats.first_hit[i] < 0 && env.goal_hit(i + 1, sr.next)) stats.first_hit[i] = t;
        }
        if (env.collision(sr.next)) ++stats.collisions;
        state = std::move(sr.next);
        if (sr.done) break;
    }
    stats.goal_reached = stats.first_hit[goal_subtask - 1] >= 0;
    return stats;
}

} // namespace

EvalReport evaluate(const Env& env, const Policy& policy, int episodes, std::uint64_t seed,
                    const EvalOptions& options) {
    if (episodes < 1) throw DomainError("evaluate: episodes must be >= 1");
    const int goal_subtask =
        options.goal_subtask > 0 ? options.goal_subtask : env.descriptor().subtask_count;

    EvalReport report;
    report.episodes.resize(episodes);
    const int workers = std::max(1, std::min(options.parallel, episodes));
    if (workers == 1) {
        for (int e = 0; e < episodes; ++e)
            report.episodes[e] = run_episode(env, policy, seed ^ static_cast<std::uint64_t>(e),
                                             options, goal_subtask);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr error;
        std::mutex error_mutex;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                try {
                    for (int e = w; e < episodes; e += workers)
                        report.episodes[e] = run_episode(
                            env, policy, seed ^ static_cast<std::uint64_t>(e), options,
                            goal_subtask);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        if (error) std::rethrow_exception(error);
    }

    const int n = env.descriptor().subtask_count;
    report.mean_returns.assign(n, 0.0);
    int reached = 0;
    for (const auto& ep : report.episodes) {
        for (int i = 0; i < n; ++i) report.mean_returns[i] += ep.returns[i];
        reached += ep.goal_reached ? 1 : 0;
        report.violations += ep.violations;
        report.collisions += ep.collisions;
    }
    for (auto& r : report.mean_returns) r /= episodes;
    report.goal_reach_fraction = static_cast<double>(reached) / episodes;
    return report;
}

std::shared_ptr<const ProposalSampler> make_arbiter_proposal(
    const ConstraintStack& stack, std::shared_ptr<const SoftQ> current,
    const std::vector<ActionVec>& action_set) {
    std::vector<std::shared_ptr<const ProposalSampler>> comps;
    std::vector<double> weights;
    if (!stack.empty()) {
        const double each = 0.5 / static_cast<double>(stack.size());
        for (std::size_t i = 0; i < stack.size(); ++i) {
            comps.push_back(std::make_shared<BoltzmannSetProposal>(stack.at(i).q_ptr(), action_set));
            weights.push_back(each);
        }
    }
    comps.push_back(std::make_shared<BoltzmannSetProposal>(current, action_set));
    weights.push_back(0.25);
    comps.push_back(std::make_shared<UniformSetProposal>(action_set));
    weights.push_back(0.25);
    return std::make_shared<MixtureProposal>(std::move(comps), std::move(weights));
}

// --- training loops ----------------------------------------------------

namespace {

std::shared_ptr<const SoftQ> alias(const SoftQ& q) {
    return {std::shared_ptr<const SoftQ>(), &q};
}

struct LossMeter {
    double sum = 0.0;
    long count = 0;
    void add(double v) {
        sum += v;
        ++count;
    }
    double take() {
        const double mean = count > 0 ? sum / count : 0.0;
        sum = 0.0;
        count = 0;
        return mean;
    }
};

struct Rollout {
    StateVec state;
    int t = 0;
};

void record_interval(TrainReport& report, const Env& env, const Policy* eval_policy, long step,
                     const TrainConfig& cfg, LossMeter& loss, long violations, long collisions,
                     const EvalOptions& eval_opts, int interval_index) {
    IntervalRecord row;
    row.step = step;
    row.loss = loss.take();
    row.violations = violations;
    row.collisions = collisions;
    if (eval_policy && cfg.eval_episodes > 0) {
        const std::uint64_t eval_seed =
            cfg.seed ^ (0xE5A1ull + 7919ull * static_cast<std::uint64_t>(interval_index));
        row.returns =
            evaluate(env, *eval_policy, cfg.eval_episodes, eval_seed, eval_opts).mean_returns;
    } else {
        row.returns.assign(env.descriptor().subtask_count,
                           std::numeric_limits<double>::quiet_NaN());
    }
    report.rows.push_back(std::move(row));
}

// Exact assignment backups for the tabular representation; the
// deterministic transitions make them valid per visit.
double masked_soft_state_value(const TabularQ& q, const Mask& mask, int s,
                               const Gridworld& env) {
    const int A = Gridworld::n_actions();
    double m = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < A; ++a) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(s) * A + a]) continue;
        m = std::max(m, q.at(s, a));
    }
    if (m == -std::numeric_limits<double>::infinity())
        throw InfeasibilityError("tabular backup: empty indifference space at state " +
                                     std::to_string(s),
                                 env.state_of(s));
    double acc = 0.0;
    for (int a = 0; a < A; ++a) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(s) * A + a]) continue;
        acc += std::exp(q.at(s, a) - m);
    }
    return m + std::log(acc);
}

double tabular_backup(TabularQ& q, const Gridworld& env, const Mask& mask, int subtask, int s,
                      int a) {
    const double v = masked_soft_state_value(q, mask, env.next_index(s, a), env);
    const double target = env.reward_sa(subtask, s, a) + q.gamma() * v;
    const double resid = q.at(s, a) - target;
    q.at(s, a) = target;
    return 0.5 * resid * resid;
}

// Backs up every permitted action at the visited state, so values stay
// fresh even where the behavior policy has stopped sampling.
double tabular_backup_row(TabularQ& q, const Gridworld& env, const Mask& mask, int subtask,
                          int s) {
    const int A = Gridworld::n_actions();
    double loss = 0.0;
    int updated = 0;
    for (int a = 0; a < A; ++a) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(s) * A + a]) continue;
        loss += tabular_backup(q, env, mask, subtask, s, a);
        ++updated;
    }
    return updated > 0 ? loss / updated : 0.0;
}

PretrainResult pretrain_tabular(const Gridworld& env, int subtask, const TrainConfig& cfg) {
    const double start_time = now_seconds();
    TabularQ q(env, cfg.gamma);
    const auto actions = Gridworld::action_set();
    BoltzmannSetPolicy explore(alias(q), actions);
    Rng rng = Rng(cfg.seed).fork(1);
    ReplayBuffer buffer(env.descriptor(), cfg.buffer_capacity, subtask);
    TrainReport report;
    LossMeter loss;
    Rollout ro{env.sample_start(rng), 0};
    const Mask no_mask;
    for (long step = 1; step <= cfg.steps; ++step) {
        const ActionVec a = explore.act(ro.state, rng);
        StepResult sr = env.step(ro.state, a, ro.t);
        buffer.push({ro.state, a, sr.reward, sr.next, sr.done});
        if (env.collision(sr.next)) ++report.total_collisions;
        ++report.env_steps;
        loss.add(tabular_backup_row(q, env, no_mask, subtask, env.index_of(ro.state)));
        if (sr.done) {
            ro.state = env.sample_start(rng);
            ro.t = 0;
        } else {
            ro.state = std::move(sr.next);
            ++ro.t;
        }
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            record_interval(report, env, &explore, step, cfg, loss, report.total_violations,
                            report.total_collisions, {}, static_cast<int>(report.rows.size()));
            if (step == cfg.steps) break;
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    return {q.clone(), std::move(buffer), std::move(report)};
}

PretrainResult pretrain_td(const Env& env, int subtask, const TrainConfig& cfg,
                           std::unique_ptr<TrainableQ> q, const Policy& explore,
                           const ValueEstimator& estimator) {
    const double start_time = now_seconds();
    const double lr = cfg.resolved_learn_rate(q->kind());
    Rng rng = Rng(cfg.seed).fork(1);
    ReplayBuffer buffer(env.descriptor(), cfg.buffer_capacity, subtask);
    TrainReport report;
    LossMeter loss;
    std::vector<Transition> batch;
    Rollout ro{env.sample_start(rng), 0};
    const TdBatchOptions td_opt{subtask, {}};
    const long warmup = std::max<long>(cfg.min_buffer, cfg.batch);
    for (long step = 1; step <= cfg.steps; ++step) {
        const ActionVec a = explore.act(ro.state, rng);
        StepResult sr = env.step(ro.state, a, ro.t);
        buffer.push({ro.state, a, sr.reward, sr.next, sr.done});
        if (env.collision(sr.next)) ++report.total_collisions;
        ++report.env_steps;
        if (buffer.size() >= static_cast<std::size_t>(warmup) && step % cfg.update_every == 0) {
            batch.resize(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) batch[i] = buffer.sample(rng);
            loss.add(q->td_update(batch, estimator, lr, rng, td_opt));
            q->polyak_update(cfg.tau);
        }
        if (sr.done) {
            ro.state = env.sample_start(rng);
            ro.t = 0;
        } else {
            ro.state = std::move(sr.next);
            ++ro.t;
        }
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            record_interval(report, env, &explore, step, cfg, loss, report.total_violations,
                            report.total_collisions, {}, static_cast<int>(report.rows.size()));
            if (step == cfg.steps) break;
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    return {q->clone(), std::move(buffer), std::move(report)};
}

} // namespace

PretrainResult pretrain_subtask(const Env& env, int subtask, const TrainConfig& cfg) {
    cfg.validate();
    const auto& desc = env.descriptor();
    if (subtask < 1 || subtask > desc.subtask_count)
        throw ConfigError("pretrain: subtask index out of range");

    if (const auto* grid = dynamic_cast<const Gridworld*>(&env))
        return pretrain_tabular(*grid, subtask, cfg);

    if (desc.action_kind == ActionKind::ContinuousUnitNorm && desc.state_dim == 2) {
        auto q = std::make_unique<GridQ>(desc, cfg.grid_nx, cfg.grid_ny, cfg.grid_bins, cfg.gamma);
        const auto bins = q->bin_actions();
        BoltzmannSetPolicy explore(alias(*q), bins);
        ValueEstimator estimator(bins);
        return pretrain_td(env, subtask, cfg, std::move(q), explore, estimator);
    }

    Rng init = Rng(cfg.seed).fork(0);
    auto q = std::make_unique<MlpQ>(desc, cfg.mlp_hidden, cfg.gamma, init);
    auto proposal = std::make_shared<UniformSphereProposal>(desc.action_dim);
    BoltzmannSampledPolicy explore(alias(*q), proposal, cfg.value_candidates);
    ValueEstimator estimator(proposal, cfg.value_candidates);
    return pretrain_td(env, subtask, cfg, std::move(q), explore, estimator);
}

namespace {

AdaptResult adapt_tabular(const Gridworld& env, const ConstraintStack& stack, int subtask,
                          const SoftQ& pretrained, const ReplayBuffer& buffer,
                          const TrainConfig& cfg, AdaptMode mode) {
    const double start_time = now_seconds();
    auto cloned = pretrained.clone();
    auto* q = dynamic_cast<TabularQ*>(cloned.get());
    if (!q) throw ConfigError("adapt: pretrained snapshot is not tabular");
    const Mask mask = stack_mask(env, stack);
    const auto actions = Gridworld::action_set();
    Rng rng = Rng(cfg.seed).fork(2);
    TrainReport report;
    LossMeter loss;

    ArbiterOptions arb_opt;
    arb_opt.exact_set = actions;
    ArbiterPolicy arbiter(ComposedQ(stack, alias(*q)), nullptr, arb_opt);
    EvalOptions eval_opts;
    eval_opts.check_stack = &stack;

    if (mode == AdaptMode::Online) {
        Rollout ro{env.sample_start(rng), 0};
        for (long step = 1; step <= cfg.steps; ++step) {
            const ActionVec a = arbiter.act(ro.state, rng);
            if (!stack.permits(ro.state, a)) ++report.total_violations;
            StepResult sr = env.step(ro.state, a, ro.t);
            if (env.collision(sr.next)) ++report.total_collisions;
            ++report.env_steps;
            loss.add(tabular_backup_row(*q, env, mask, subtask, env.index_of(ro.state)));
            if (sr.done) {
                ro.state = env.sample_start(rng);
                ro.t = 0;
            } else {
                ro.state = std::move(sr.next);
                ++ro.t;
            }
            if (step % cfg.eval_interval == 0 || step == cfg.steps) {
                record_interval(report, env, &arbiter, step, cfg, loss, report.total_violations,
                                report.total_collisions, eval_opts,
                                static_cast<int>(report.rows.size()));
                if (step == cfg.steps) break;
            }
        }
    } else {
        const ReplayBuffer filtered = filter_buffer(buffer, stack);
        if (filtered.size() == 0)
            throw RuntimeAbort("offline adaptation: the filtered buffer is empty");
        for (long step = 1; step <= cfg.steps; ++step) {
            const Transition& t = filtered.at((step - 1) % filtered.size());
            loss.add(tabular_backup(*q, env, mask, subtask, env.index_of(t.state),
                                    static_cast<int>(std::lround(t.action[0]))));
            if (step % cfg.eval_interval == 0 || step == cfg.steps) {
                record_interval(report, env, nullptr, step, cfg, loss, 0, 0, eval_opts,
                                static_cast<int>(report.rows.size()));
                if (step == cfg.steps) break;
            }
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    return {q->clone(), std::move(report)};
}

/// Rejection-samples buffer indices until one passes the stack; verdicts
/// are memoized per index, which makes the lazy filter equivalent to the
/// eager one for a fixed stack.
class LazyFilteredSampler {
public:
    LazyFilteredSampler(const ReplayBuffer& buffer, const ConstraintStack& stack)
        : buffer_(buffer), stack_(stack), verdict_(buffer.size(), -1) {}

    const Transition& sample(Rng& rng) {
        const std::size_t n = buffer_.size();
        for (std::size_t tries = 0; tries < 64 * n + 64; ++tries) {
            const std::size_t i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)));
            if (verdict_[i] < 0) {
                const Transition& t = buffer_.at(i);
                verdict_[i] = stack_.permits(t.state, t.action) ? 1 : 0;
            }
            if (verdict_[i] == 1) return buffer_.at(i);
        }
        throw RuntimeAbort("offline adaptation: could not draw a permitted transition; the "
                           "buffer appears to be fully constraint-violating");
    }

private:
    const ReplayBuffer& buffer_;
    const ConstraintStack& stack_;
    std::vector<std::int8_t> verdict_;
};

AdaptResult adapt_td(const Env& env, const ConstraintStack& stack, int subtask,
                     const SoftQ& pretrained, const ReplayBuffer& buffer, const TrainConfig& cfg,
                     AdaptMode mode) {
    const double start_time = now_seconds();
    auto cloned = pretrained.clone();
    auto* q = dynamic_cast<TrainableQ*>(cloned.get());
    if (!q) throw ConfigError("adapt: pretrained snapshot is not a trainable representation");
    const double lr = cfg.resolved_learn_rate(q->kind());
    Rng rng = Rng(cfg.seed).fork(2);
    TrainReport report;
    LossMeter loss;
    std::vector<Transition> batch;
    const TdBatchOptions td_opt{subtask, {}};

    const bool grid_like = q->kind() == "grid";
    std::shared_ptr<const ProposalSampler> proposal;
    std::unique_ptr<ValueEstimator> estimator;
    ArbiterOptions arb_opt;
    arb_opt.batch_size = cfg.arbiter_batch;
    arb_opt.rejection_cap = cfg.rejection_cap;
    if (grid_like) {
        const auto& bins = dynamic_cast<const GridQ*>(q)->bin_actions();
        proposal = make_arbiter_proposal(stack, alias(*q), bins);
        estimator = std::make_unique<ValueEstimator>(bins, &stack);
    } else {
        proposal = std::make_shared<UniformSphereProposal>(env.descriptor().action_dim);
        estimator = std::make_unique<ValueEstimator>(proposal, cfg.value_candidates, &stack);
    }
    ArbiterPolicy arbiter(ComposedQ(stack, alias(*q)), proposal, arb_opt);
    EvalOptions eval_opts;
    eval_opts.check_stack = &stack;

    if (mode == AdaptMode::Online) {
        // Alg.-style working set: constraint-filtered retained data plus the
        // new on-arbiter transitions.
        ReplayBuffer working = filter_buffer(buffer, stack);
        Rollout ro{env.sample_start(rng), 0};
        const long warmup = std::max<long>(cfg.min_buffer, cfg.batch);
        for (long step = 1; step <= cfg.steps; ++step) {
            const ActionVec a = arbiter.act(ro.state, rng);
            if (!stack.permits(ro.state, a)) ++report.total_violations;
            StepResult sr = env.step(ro.state, a, ro.t);
            working.push({ro.state, a, sr.reward, sr.next, sr.done});
            if (env.collision(sr.next)) ++report.total_collisions;
            ++report.env_steps;
            if (working.size() >= static_cast<std::size_t>(warmup) &&
                step % cfg.update_every == 0) {
                batch.resize(cfg.batch);
                for (int i = 0; i < cfg.batch; ++i) batch[i] = working.sample(rng);
                loss.add(q->td_update(batch, *estimator, lr, rng, td_opt));
                q->polyak_update(cfg.tau);
            }
            if (sr.done) {
                ro.state = env.sample_start(rng);
                ro.t = 0;
            } else {
                ro.state = std::move(sr.next);
                ++ro.t;
            }
            if (step % cfg.eval_interval == 0 || step == cfg.steps) {
                record_interval(report, env, &arbiter, step, cfg, loss, report.total_violations,
                                report.total_collisions, eval_opts,
                                static_cast<int>(report.rows.size()));
                if (step == cfg.steps) break;
            }
        }
    } else {
        if (buffer.size() == 0)
            throw RuntimeAbort("offline adaptation: the retained buffer is empty");
        LazyFilteredSampler sampler(buffer, stack);
        for (long step = 1; step <= cfg.steps; ++step) {
            batch.resize(cfg.batch);
            for (int i = 0; i < cfg.batch; ++i) batch[i] = sampler.sample(rng);
            loss.add(q->td_update(batch, *estimator, lr, rng, td_opt));
            q->polyak_update(cfg.tau);
            if (step % cfg.eval_interval == 0 || step == cfg.steps) {
                record_interval(report, env, nullptr, step, cfg, loss, 0, 0, eval_opts,
                                static_cast<int>(report.rows.size()));
                if (step == cfg.steps) break;
            }
        }
    }
    report.wall_time_s = now_seconds() - start_time;
    return {q->clone(), std::move(report)};
}

} // namespace

AdaptResult adapt_subtask(const Env& env, const ConstraintStack& stack, int subtask,
                          const SoftQ& pretrained, const ReplayBuffer& buffer,
                          const TrainConfig& cfg, AdaptMode mode) {
    cfg.validate();
    const auto& desc = env.descriptor();
    if (subtask < 1 || subtask > desc.subtask_count)
        throw ConfigError("adapt: subtask index out of range");
    if (const auto* grid = dynamic_cast<const Gridworld*>(&env))
        return adapt_tabular(*grid, stack, subtask, pretrained, buffer, cfg, mode);
    return adapt_td(env, stack, subtask, pretrained, buffer, cfg, mode);
}

} // namespace psqd
