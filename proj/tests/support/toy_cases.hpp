#pragma once

#include <string>

#include "gd2rl/grid.hpp"

namespace gd2rl::testing {

// Three buses in a ring: slack at 1, two adjustable machines at 2 and 3, one PV unit at 3.
inline const char* kThreeBusCase = R"(base_mva 100
[bus]
1 slack 1.00 0 0 0.9 1.1
2 pv 1.00 150 30 0.9 1.1
3 pv 1.00 250 40 0.9 1.1
[branch]
1 1 2 0.01 0.10 0.02 1
2 2 3 0.01 0.10 0.02 1
3 1 3 0.01 0.10 0.02 1
[generator]
1 100 0 500 5.0 0.10 1.0 0 0
2 100 0 400 4.0 0.20 0.8 3 1
3 200 0 400 3.0 0.20 0.6 5 1
[pv]
3 50 10 100
)";

// Two machines joined by a single line.
inline const char* kTwoBusCase = R"(base_mva 100
[bus]
1 slack 1.00 0 0 0.9 1.1
2 pv 1.00 50 10 0.9 1.1
[branch]
1 1 2 0.0 0.20 0.0 1
[generator]
1 0 -500 500 5.0 0.10 0.0 0 0
2 100 0 400 4.0 0.20 0.0 3 1
)";

inline NetworkCase three_bus() { return parse_case(kThreeBusCase, "three-bus"); }
inline NetworkCase two_bus() { return parse_case(kTwoBusCase, "two-bus"); }
inline NetworkCase shipped() { return load_case(shipped_case_path()); }
inline NetworkCase standard() { return load_case(shipped_case_path("case39_standard.case")); }

}  // namespace gd2rl::testing
