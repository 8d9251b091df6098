#include "capscl/rng.hpp"

#include <cmath>

namespace capscl {

double Rng::gumbel() { return -std::log(-std::log(uniform_open())); }

}  // namespace capscl
