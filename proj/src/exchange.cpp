#include "hypersyn/exchange.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include "hypersyn/errors.hpp"

namespace hypersyn {

namespace {

using boost::multiprecision::uint256_t;

uint256_t wide(CreditAmount v) {
    return (uint256_t(std::uint64_t(v >> 64)) << 64) | uint256_t(std::uint64_t(v));
}

CreditAmount narrow(const uint256_t& v) {
    if (v >> 128 != 0) throw OverflowError("amount exceeds 128 bits");
    return (CreditAmount(std::uint64_t(v >> 64)) << 64) | CreditAmount(std::uint64_t(v & ~std::uint64_t(0)));
}

void require_active(const ReservePair& r) {
    if (!r.active()) throw InsufficientDepthError("edge reserves must be positive");
}

}  // namespace

CreditAmount quote_output(const ReservePair& reserves, CreditAmount delta_in) {
    require_active(reserves);
    if (delta_in == 0) return 0;
    CreditAmount denom = checked_add(reserves.r_a, delta_in);
    uint256_t out = wide(delta_in) * wide(reserves.r_b) / wide(denom);
    return narrow(out);
}

CreditAmount quote_input(const ReservePair& reserves, CreditAmount delta_out) {
    require_active(reserves);
    if (delta_out == 0) return 0;
    if (delta_out >= reserves.r_b) throw InsufficientDepthError("requested output meets or exceeds reserve");
    uint256_t num = wide(reserves.r_a) * wide(delta_out);
    uint256_t den = wide(reserves.r_b - delta_out);
    return narrow((num + den - 1) / den);
}

TradeResult apply_trade(const ReservePair& reserves, CreditAmount delta_in) {
    CreditAmount out = quote_output(reserves, delta_in);
    TradeResult r;
    r.delta_out = out;
    r.reserves.r_a = checked_add(reserves.r_a, delta_in);
    r.reserves.r_b = reserves.r_b - out;
    return r;
}

}  // namespace hypersyn
