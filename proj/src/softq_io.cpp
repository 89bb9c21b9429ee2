#include "psqd/softq_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace psqd {

static_assert(std::endian::native == std::endian::little,
              "snapshot format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'S', 'Q', 'D', 'Q', 'S', 'N', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void i32(std::int32_t v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void f64s(const std::vector<double>& v) { bytes(v.data(), v.size() * 8); }

private:
    std::ostream& out_;
};

class Reader {
public:
    Reader(std::istream& in, std::string origin) : in_(in), origin_(std::move(origin)) {}

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw ConfigError(origin_ + ": truncated at offset " + std::to_string(offset_));
        offset_ += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    void f64s(std::vector<double>& v, std::size_t n) {
        v.resize(n);
        bytes(v.data(), n * 8);
    }
    std::size_t offset() const { return offset_; }
    const std::string& origin() const { return origin_; }

private:
    std::istream& in_;
    std::string origin_;
    std::size_t offset_ = 0;
};

void write_descriptor(Writer& w, const EnvDescriptor& d) {
    w.i32(d.state_dim);
    w.i32(d.action_dim);
    w.i32(d.subtask_count);
    w.u8(static_cast<std::uint8_t>(d.action_kind));
    w.i32(d.horizon);
    w.i32(d.discrete_actions);
    w.f64s(d.bounds_lo);
    w.f64s(d.bounds_hi);
}

EnvDescriptor read_descriptor(Reader& r) {
    EnvDescriptor d;
    d.state_dim = r.i32();
    d.action_dim = r.i32();
    d.subtask_count = r.i32();
    d.action_kind = static_cast<ActionKind>(r.u8());
    d.horizon = r.i32();
    d.discrete_actions = r.i32();
    if (d.state_dim < 1 || d.state_dim > 1024)
        throw ConfigError(r.origin() + ": corrupt descriptor at offset " +
                          std::to_string(r.offset()));
    r.f64s(d.bounds_lo, d.state_dim);
    r.f64s(d.bounds_hi, d.state_dim);
    return d;
}

} // namespace

// Snapshot payloads reach into the private fields of the representations.
class SnapshotCodec {
public:
    static void write(const SoftQ& q, std::ostream& out) {
        Writer w(out);
        w.bytes(kMagic, sizeof(kMagic));
        w.u32(kVersion);
        if (const auto* t = dynamic_cast<const TabularQ*>(&q)) {
            w.u8(0);
            write_descriptor(w, t->desc_);
            w.f64(t->gamma_);
            w.i32(t->n_states_);
            w.i32(t->n_actions_);
            w.i32(t->grid_width_);
            w.f64s(t->table_);
            return;
        }
        if (const auto* g = dynamic_cast<const GridQ*>(&q)) {
            w.u8(1);
            write_descriptor(w, g->desc_);
            w.f64(g->gamma_);
            w.i32(g->nx_);
            w.i32(g->ny_);
            w.i32(g->n_bins_);
            w.f64s(g->online_);
            w.f64s(g->target_);
            return;
        }
        if (const auto* m = dynamic_cast<const MlpQ*>(&q)) {
            w.u8(2);
            write_descriptor(w, m->desc_);
            w.f64(m->gamma_);
            w.i32(static_cast<std::int32_t>(m->sizes_.size()));
            for (int s : m->sizes_) w.i32(s);
            w.f64s(m->params_);
            w.f64s(m->target_);
            return;
        }
        throw DomainError("snapshot: unsupported Q representation '" + q.kind() + "'");
    }

    static std::unique_ptr<SoftQ> read(std::istream& in, const std::string& origin) {
        Reader r(in, origin);
        char magic[8];
        r.bytes(magic, sizeof(magic));
        if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
            throw ConfigError(origin + ": not a Q snapshot (bad magic)");
        const std::uint32_t version = r.u32();
        if (version != kVersion)
            throw ConfigError(origin + ": unsupported snapshot version " +
                              std::to_string(version));
        const std::uint8_t kind = r.u8();
        EnvDescriptor desc = read_descriptor(r);
        const double gamma = r.f64();
        switch (kind) {
        case 0: {
            const int n_states = r.i32();
            const int n_actions = r.i32();
            const int grid_width = r.i32();
            auto q = std::make_unique<TabularQ>(n_states, n_actions, gamma);
            q->desc_ = desc;
            q->grid_width_ = grid_width;
            r.f64s(q->table_, static_cast<std::size_t>(n_states) * n_actions);
            return q;
        }
        case 1: {
            const int nx = r.i32();
            const int ny = r.i32();
            const int n_bins = r.i32();
            auto q = std::make_unique<GridQ>(desc, nx, ny, n_bins, gamma);
            const std::size_t n = static_cast<std::size_t>(nx) * ny * n_bins;
            r.f64s(q->online_, n);
            r.f64s(q->target_, n);
            return q;
        }
        case 2: {
            const int n_sizes = r.i32();
            if (n_sizes < 2 || n_sizes > 64)
                throw ConfigError(origin + ": corrupt layer count at offset " +
                                  std::to_string(r.offset()));
            std::vector<int> sizes(n_sizes);
            for (auto& s : sizes) s = r.i32();
            std::vector<int> hidden(sizes.begin() + 1, sizes.end() - 1);
            Rng dummy(0);
            auto q = std::make_unique<MlpQ>(desc, hidden, gamma, dummy);
            r.f64s(q->params_, q->params_.size());
            r.f64s(q->target_, q->params_.size());
            return q;
        }
        default:
            throw ConfigError(origin + ": unknown representation tag " + std::to_string(kind));
        }
    }
};

void write_snapshot(const SoftQ& q, std::ostream& out) {
    SnapshotCodec::write(q, out);
}

std::unique_ptr<SoftQ> read_snapshot(std::istream& in, const std::string& origin) {
    return SnapshotCodec::read(in, origin);
}

void save_snapshot(const SoftQ& q, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeAbort("snapshot: cannot open " + path + " for writing");
    write_snapshot(q, out);
    if (!out) throw RuntimeAbort("snapshot: write failed: " + path);
}

std::unique_ptr<SoftQ> load_snapshot(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("snapshot: cannot open " + path);
    return read_snapshot(in, path);
}

std::string grid_value_json(const GridQ& q) {
    nlohmann::json j;
    j["kind"] = "grid_value";
    j["shape"] = {q.nx(), q.ny(), q.n_bins()};
    j["bounds_lo"] = q.descriptor().bounds_lo;
    j["bounds_hi"] = q.descriptor().bounds_hi;
    std::vector<double> soft(static_cast<std::size_t>(q.nx()) * q.ny());
    std::vector<double> row(q.n_bins());
    const auto& lo = q.descriptor().bounds_lo;
    const auto& hi = q.descriptor().bounds_hi;
    for (int iy = 0; iy < q.ny(); ++iy) {
        for (int ix = 0; ix < q.nx(); ++ix) {
            const StateVec s = {lo[0] + (hi[0] - lo[0]) * ix / (q.nx() - 1),
                                lo[1] + (hi[1] - lo[1]) * iy / (q.ny() - 1)};
            q.bin_values(s, row);
            soft[static_cast<std::size_t>(iy) * q.nx() + ix] = log_sum_exp(row);
        }
    }
    j["soft_value"] = soft;
    return j.dump();
}

std::string state_row_json(const SoftQ& q, const StateVec& state,
                           std::span<const ActionVec> actions) {
    nlohmann::json j;
    j["state"] = state;
    std::vector<double> qs(actions.size());
    q.values(state, actions, qs);
    j["q_values"] = qs;
    nlohmann::json acts = nlohmann::json::array();
    for (const auto& a : actions) acts.push_back(a);
    j["actions"] = acts;
    return j.dump();
}

} // namespace psqd
