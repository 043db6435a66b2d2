#include "hypersyn/arbitrage.hpp"

#include <cmath>

#include "hypersyn/errors.hpp"

namespace hypersyn {

TriangleView TriangleView::reversed() const {
    TriangleView r;
    r.node_i = node_i;
    r.node_j = node_k;
    r.node_k = node_j;
    r.r_ij = r_ik;
    r.r_ji = r_ki;
    r.r_jk = r_kj;
    r.r_kj = r_jk;
    r.r_ki = r_ji;
    r.r_ik = r_ij;
    return r;
}

std::optional<TriangleView> TriangleView::rotated_to(const Digest& start) const {
    if (start == node_i) return *this;
    TriangleView r;
    if (start == node_j) {
        // (i,j,k) -> (j,k,i)
        r.node_i = node_j;
        r.node_j = node_k;
        r.node_k = node_i;
        r.r_ij = r_jk;
        r.r_ji = r_kj;
        r.r_jk = r_ki;
        r.r_kj = r_ik;
        r.r_ki = r_ij;
        r.r_ik = r_ji;
        return r;
    }
    if (start == node_k) {
        // (i,j,k) -> (k,i,j)
        r.node_i = node_k;
        r.node_j = node_i;
        r.node_k = node_j;
        r.r_ij = r_ki;
        r.r_ji = r_ik;
        r.r_jk = r_ij;
        r.r_kj = r_ji;
        r.r_ki = r_jk;
        r.r_ik = r_kj;
        return r;
    }
    return std::nullopt;
}

RealTriangle to_real(const TriangleView& view) {
    RealTriangle t;
    t.r_ij = amount_to_double(view.r_ij);
    t.r_ji = amount_to_double(view.r_ji);
    t.r_jk = amount_to_double(view.r_jk);
    t.r_kj = amount_to_double(view.r_kj);
    t.r_ki = amount_to_double(view.r_ki);
    t.r_ik = amount_to_double(view.r_ik);
    return t;
}

VirtualReserves virtual_reserves_real(const RealTriangle& t) {
    // Collapse hops 1+2 into one pool, then fold in hop 3.
    double denom12 = t.r_jk + t.r_ji;
    double in12 = t.r_ij * t.r_jk / denom12;
    double out12 = t.r_ji * t.r_kj / denom12;
    double denom123 = t.r_ki + out12;
    VirtualReserves v;
    v.a = in12 * t.r_ki / denom123;
    v.a_prime = t.r_ik * out12 / denom123;
    return v;
}

VirtualReserves virtual_reserves(const TriangleView& view) {
    return virtual_reserves_real(to_real(view));
}

double optimal_volume(double a, double a_prime) {
    return std::sqrt(a_prime * a) - a;
}

CycleQuote quote_cycle(const TriangleView& oriented, CreditAmount delta) {
    CycleQuote q;
    if (delta == 0) return q;
    q.hop_amounts[0] = quote_output(oriented.hop1(), delta);
    q.hop_amounts[1] = quote_output(oriented.hop2(), q.hop_amounts[0]);
    q.hop_amounts[2] = quote_output(oriented.hop3(), q.hop_amounts[1]);
    if (q.hop_amounts[2] > delta) {
        q.profitable = true;
        q.profit = q.hop_amounts[2] - delta;
    }
    return q;
}

namespace {

// Best integer volume for one orientation: floor or ceil of the real
// optimum, whichever realizes more profit.
std::optional<CyclePlan> plan_direction(const TriangleView& oriented, CycleDirection dir) {
    if (!oriented.positive()) return std::nullopt;
    VirtualReserves v = virtual_reserves(oriented);
    double opt = optimal_volume(v.a, v.a_prime);
    if (!(opt > 0)) return std::nullopt;

    double fl = std::floor(opt);
    double cl = std::ceil(opt);
    CreditAmount lo = fl < 1 ? 1 : CreditAmount(fl);
    CreditAmount hi = cl < 1 ? 1 : CreditAmount(cl);

    CycleQuote best_q;
    CreditAmount best_delta = 0;
    for (CreditAmount d : {lo, hi}) {
        if (d == best_delta) continue;
        CycleQuote q = quote_cycle(oriented, d);
        if (q.profitable && (!best_q.profitable || q.profit > best_q.profit)) {
            best_q = q;
            best_delta = d;
        }
    }
    if (!best_q.profitable) return std::nullopt;

    CyclePlan plan;
    plan.start = oriented.node_i;
    plan.direction = dir;
    plan.basis = oriented;
    plan.delta_in = best_delta;
    plan.hop_amounts = best_q.hop_amounts;
    plan.expected_profit = best_q.profit;
    return plan;
}

}  // namespace

std::optional<CyclePlan> best_cycle(const TriangleView& view, const Digest& start) {
    auto rotated = view.rotated_to(start);
    if (!rotated) return std::nullopt;
    auto fwd = plan_direction(*rotated, CycleDirection::Forward);
    auto rev = plan_direction(rotated->reversed(), CycleDirection::Reverse);
    if (!fwd) return rev;
    if (!rev) return fwd;
    return rev->expected_profit > fwd->expected_profit ? rev : fwd;
}

std::optional<std::pair<Digest, CyclePlan>> select_initiator(
    const std::vector<std::pair<Digest, CyclePlan>>& candidates) {
    const std::pair<Digest, CyclePlan>* best = nullptr;
    for (const auto& c : candidates) {
        if (c.second.delta_in == 0) continue;
        if (!best || c.second.delta_in < best->second.delta_in ||
            (c.second.delta_in == best->second.delta_in && c.first < best->first))
            best = &c;
    }
    if (!best) return std::nullopt;
    return *best;
}

CycleExecution execute_cycle(const TriangleView& current, const CyclePlan& plan) {
    if (current != plan.basis) throw StaleReservesError("reserves changed since planning");
    CycleExecution ex;
    TradeResult t1 = apply_trade(current.hop1(), plan.delta_in);
    TradeResult t2 = apply_trade(current.hop2(), t1.delta_out);
    TradeResult t3 = apply_trade(current.hop3(), t2.delta_out);
    if (t3.delta_out < plan.delta_in) return ex;  // aborted, no mutation
    ex.executed = true;
    ex.reserves = {t1.reserves, t2.reserves, t3.reserves};
    ex.realized_profit = t3.delta_out - plan.delta_in;
    return ex;
}

RealTriangle execute_cycle_real(const RealTriangle& t, double delta) {
    RealTriangle r = t;
    double out1 = delta * t.r_ji / (t.r_ij + delta);
    r.r_ij += delta;
    r.r_ji -= out1;
    double out2 = out1 * t.r_kj / (t.r_jk + out1);
    r.r_jk += out1;
    r.r_kj -= out2;
    double out3 = out2 * t.r_ik / (t.r_ki + out2);
    r.r_ki += out2;
    r.r_ik -= out3;
    return r;
}

}  // namespace hypersyn
