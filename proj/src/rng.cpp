#include "mclokd/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "mclokd/error.hpp"

namespace mclokd {

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw InvalidInput("Rng::below: n must be positive");
    // Rejection on the top of the range keeps the draw exactly uniform.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw IntegrityError("Rng::set_state: malformed engine state");
}

}  // namespace mclokd
