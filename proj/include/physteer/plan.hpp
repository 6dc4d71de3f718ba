#pragma once

#include "physteer/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace physteer {

/// Unit steering direction at one layer. Positive points toward "impossible".
struct Cav {
    int layer = 0;
    VectorXd direction;
    std::string scope = "all";    // all | O1 | O2 | O3
    std::string task = "plausibility";
    double norm_before = 0.0;     // ||w|| before normalization
    double source_accuracy = 0.0; // CV accuracy of the source probe
};

struct Injection {
    int layer = 0;
    Cav cav;
    double alpha = 0.0;
};

/// At most one injection per layer, kept sorted by layer.
struct SteeringPlan {
    std::vector<Injection> injections;

    bool empty() const { return injections.empty(); }
    const Injection* at(int layer) const;
};

}  // namespace physteer
