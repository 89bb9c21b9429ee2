#pragma once

#include "psqd/config.hpp"
#include "psqd/softq.hpp"

#include <iosfwd>
#include <memory>
#include <string>

namespace psqd {

/// Versioned binary snapshot of a Q-function (.qsnap): magic bytes,
/// version, descriptor, then the representation payload. Little-endian
/// fixed-width fields throughout.
void save_snapshot(const SoftQ& q, const std::string& path);
std::unique_ptr<SoftQ> load_snapshot(const std::string& path);

void write_snapshot(const SoftQ& q, std::ostream& out);
std::unique_ptr<SoftQ> read_snapshot(std::istream& in, const std::string& origin);

/// JSON dump of a grid Q: shape metadata plus node values, one soft value
/// (log-sum-exp over bins) per state node. Plot-ready.
std::string grid_value_json(const GridQ& q);

/// JSON dump of all bin values at one state.
std::string state_row_json(const SoftQ& q, const StateVec& state,
                           std::span<const ActionVec> actions);

} // namespace psqd
