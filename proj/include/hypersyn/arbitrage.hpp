#pragma once

// Triangular arbitrage over three edges. Planning collapses the cycle
// into one virtual constant-product pool (reals), takes the closed-form
// optimal volume, then discretizes; execution replays the three legs in
// exact integers and aborts unless the realized profit is non-negative.

#include <array>
#include <optional>

#include "hypersyn/bytes.hpp"
#include "hypersyn/exchange.hpp"

namespace hypersyn {

// Ordered corners (i, j, k); R(x,y) is the reserve of x's credit inside
// edge E_xy. The forward cycle is C_i -> C_j -> C_k -> C_i.
struct TriangleView {
    Digest node_i{}, node_j{}, node_k{};
    CreditAmount r_ij = 0, r_ji = 0;
    CreditAmount r_jk = 0, r_kj = 0;
    CreditAmount r_ki = 0, r_ik = 0;

    bool operator==(const TriangleView&) const = default;

    bool positive() const {
        return r_ij > 0 && r_ji > 0 && r_jk > 0 && r_kj > 0 && r_ki > 0 && r_ik > 0;
    }

    // Same triangle walked i -> k -> j -> i.
    TriangleView reversed() const;
    // Reorient so `start` is corner i; nullopt if start is no corner.
    std::optional<TriangleView> rotated_to(const Digest& start) const;

    // Reserve pairs oriented along the three forward hops.
    ReservePair hop1() const { return {r_ij, r_ji}; }
    ReservePair hop2() const { return {r_jk, r_kj}; }
    ReservePair hop3() const { return {r_ki, r_ik}; }
};

struct VirtualReserves {
    double a = 0;        // virtual input-side reserve of the whole cycle
    double a_prime = 0;  // virtual output-side reserve
};

VirtualReserves virtual_reserves(const TriangleView& view);

// sqrt(a' * a) - a; positive iff a' > a.
double optimal_volume(double a, double a_prime);

enum class CycleDirection : std::uint8_t { Forward = 0, Reverse = 1 };

struct CyclePlan {
    Digest start{};
    CycleDirection direction = CycleDirection::Forward;
    // Reserves the plan assumed, oriented along the trade direction.
    TriangleView basis;
    CreditAmount delta_in = 0;
    std::array<CreditAmount, 3> hop_amounts{};
    CreditAmount expected_profit = 0;
};

// Integer profit of inserting delta into the oriented cycle.
// Returns final output minus delta; negative results clamp at
// "unprofitable" via the bool.
struct CycleQuote {
    std::array<CreditAmount, 3> hop_amounts{};
    bool profitable = false;
    CreditAmount profit = 0;  // valid when profitable
};
CycleQuote quote_cycle(const TriangleView& oriented, CreditAmount delta);

// Evaluate both directions from `start`; pick the one with larger
// positive integer profit, delta chosen between floor and ceil of the
// real optimum (clamped to >= 1). none if neither direction profits.
std::optional<CyclePlan> best_cycle(const TriangleView& view, const Digest& start);

// Smallest positive delta wins; ties break on node address bytes.
std::optional<std::pair<Digest, CyclePlan>> select_initiator(
    const std::vector<std::pair<Digest, CyclePlan>>& candidates);

struct CycleExecution {
    bool executed = false;
    // Post-trade reserves oriented along the plan direction.
    std::array<ReservePair, 3> reserves{};
    CreditAmount realized_profit = 0;
};

// Replays the three legs on the given oriented reserves.
// StaleReservesError if they differ from the plan's basis; aborts
// without effect if the realized profit would be negative.
CycleExecution execute_cycle(const TriangleView& current, const CyclePlan& plan);

// Real-valued triangle for planning flows that settle elsewhere (edge
// opening); same field meaning as TriangleView.
struct RealTriangle {
    double r_ij = 0, r_ji = 0;
    double r_jk = 0, r_kj = 0;
    double r_ki = 0, r_ik = 0;
};

RealTriangle to_real(const TriangleView& view);
// Push `delta` of i's credit around the forward cycle, exactly in reals.
RealTriangle execute_cycle_real(const RealTriangle& t, double delta);
VirtualReserves virtual_reserves_real(const RealTriangle& t);

}  // namespace hypersyn
