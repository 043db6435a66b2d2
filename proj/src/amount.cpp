#include "hypersyn/amount.hpp"

#include <algorithm>

namespace hypersyn {

std::string amount_to_string(CreditAmount v) {
    if (v == 0) return "0";
    std::string out;
    while (v != 0) {
        out.push_back(char('0' + int(v % 10)));
        v /= 10;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

CreditAmount amount_from_string(std::string_view s) {
    if (s.empty()) throw ConfigError("empty credit amount");
    CreditAmount v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') throw ConfigError("invalid credit amount: non-digit");
        CreditAmount d = CreditAmount(c - '0');
        if (v > (kMaxCreditAmount - d) / 10) throw OverflowError("credit amount literal out of range");
        v = v * 10 + d;
    }
    return v;
}

}  // namespace hypersyn
