#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gradsuite {

struct CaseResult {
    std::string name;
    double worst = 0.0;   ///< largest relative error over all seeds
    std::string where;    ///< element that produced it
    std::size_t checked = 0;
    std::size_t kinks = 0;   ///< elements on a non-smooth point, not scored
};

/// Central finite differences (h = 1e-5, 64-bit) against tape gradients for
/// every differentiable op and the full plugin/model, once per seed.
std::vector<CaseResult> run(const std::vector<std::uint64_t>& seeds);

}  // namespace gradsuite
