#pragma once

namespace flowcast {

// Process-wide cap on worker threads used for trajectory generation.
// Defaults to 1; the CLI raises it from the FLOWCAST_THREADS variable.
// Output is byte-identical at any setting (per-trajectory rng forks).
int max_threads();
void set_max_threads(int n);

}  // namespace flowcast
