// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "tsmoe/errors.hpp"

namespace tsmoe {

double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) return 0;
    // Rejection sampling keeps the draw unbiased for any n.
    const std::uint64_t limit = Rng::max() - (Rng::max() % n);
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return static_cast<std::size_t>(v % n);
}

std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void restore_rng_state(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw FormatError("invalid rng state");
}

} // namespace tsmoe
