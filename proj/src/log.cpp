#include "qseg/log.hpp"

#include <array>
#include <cstdio>

namespace qseg {

namespace {
std::array<std::atomic<uint64_t>, static_cast<size_t>(Warn::count_)> counts{};
}

void warn(Warn category, const std::string& message) {
    const auto idx = static_cast<size_t>(category);
    // First occurrence per category goes to stderr; the rest only count.
    if (counts[idx].fetch_add(1, std::memory_order_relaxed) == 0) {
        std::fprintf(stderr, "warn: %s\n", message.c_str());
    }
}

uint64_t warn_count(Warn category) {
    return counts[static_cast<size_t>(category)].load(std::memory_order_relaxed);
}

void reset_warn_counts() {
    for (auto& c : counts) c.store(0, std::memory_order_relaxed);
}

}  // namespace qseg
