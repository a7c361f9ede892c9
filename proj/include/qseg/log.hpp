#pragma once

#include <atomic>
#include <cstdint>
#include <string>

namespace qseg {

/// Warning categories that fire from inner loops. Each category logs its
/// first occurrence to stderr and counts the rest.
enum class Warn : int {
    zero_norm_cosine = 0,
    degenerate_reconstruction,
    alignment_skipped,
    nonfinite_gradient,
    count_
};

void warn(Warn category, const std::string& message);
uint64_t warn_count(Warn category);
void reset_warn_counts();

}  // namespace qseg
