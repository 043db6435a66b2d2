#pragma once

// Credit amounts are unsigned 128-bit integers. All protocol arithmetic
// that could overflow goes through the checked helpers here; intermediate
// products inside the exchange use 256-bit arithmetic and never truncate.

#include <cstdint>
#include <string>
#include <string_view>

#include "hypersyn/errors.hpp"

namespace hypersyn {

using CreditAmount = unsigned __int128;

inline constexpr CreditAmount kMaxCreditAmount = ~CreditAmount(0);

inline CreditAmount checked_add(CreditAmount a, CreditAmount b) {
    CreditAmount s = a + b;
    if (s < a) throw OverflowError("credit amount addition overflow");
    return s;
}

inline CreditAmount checked_sub(CreditAmount a, CreditAmount b) {
    if (b > a) throw OverflowError("credit amount subtraction underflow");
    return a - b;
}

std::string amount_to_string(CreditAmount v);
CreditAmount amount_from_string(std::string_view s);

// Lossy, for metrics and logs only.
inline double amount_to_double(CreditAmount v) {
    return static_cast<double>(v);
}

}  // namespace hypersyn
