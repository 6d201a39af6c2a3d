#pragma once

#include <stdexcept>
#include <string>

namespace blockprune {

/// Raised when an input violates an operation's preconditions
/// (shape mismatch, non-divisible block shape, malformed file, ...).
class precondition_error : public std::invalid_argument {
  public:
	using std::invalid_argument::invalid_argument;
};

/// Raised by the allocator when the FLOPs target cannot be met on the grid.
class infeasible_error : public std::runtime_error {
  public:
	infeasible_error(const std::string& what, double floor)
	    : std::runtime_error(what), floor_(floor) {}

	/// Smallest FLOPs ratio reachable with every prunable layer fully pruned.
	double achievable_floor() const noexcept { return floor_; }

  private:
	double floor_;
};

inline void require(bool cond, const std::string& msg) {
	if (!cond) throw precondition_error(msg);
}

} // namespace blockprune
