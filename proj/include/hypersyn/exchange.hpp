#pragma once

// Constant-product exchange math for one edge. An edge holds a reserve
// of each endpoint's credit; a trade deposits delta_in of one side's
// credit and withdraws delta_out of the other side's such that the
// reserve product never decreases. All rounding favors the reserves:
// outputs floor, required inputs ceil.

#include "hypersyn/amount.hpp"

namespace hypersyn {

struct ReservePair {
    CreditAmount r_a = 0;  // reserve of side-A credit
    CreditAmount r_b = 0;

    bool active() const { return r_a > 0 && r_b > 0; }
    bool operator==(const ReservePair&) const = default;
};

// floor(delta_in * r_b / (r_a + delta_in)); always < r_b.
CreditAmount quote_output(const ReservePair& reserves, CreditAmount delta_in);

// ceil(r_a * delta_out / (r_b - delta_out)); the smallest input whose
// quote_output covers delta_out. InsufficientDepthError if
// delta_out >= r_b.
CreditAmount quote_input(const ReservePair& reserves, CreditAmount delta_out);

struct TradeResult {
    ReservePair reserves;
    CreditAmount delta_out = 0;
};

// Deposit delta_in of A-credit, withdraw quote_output of B-credit.
TradeResult apply_trade(const ReservePair& reserves, CreditAmount delta_in);

}  // namespace hypersyn
