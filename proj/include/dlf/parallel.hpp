#pragma once

#include <cstddef>
#include <functional>
#include <optional>

namespace dlf {

/// Worker count from an explicit request, else DLF_WORKERS, else 1.
int resolve_workers(std::optional<int> requested = std::nullopt);

/// Runs fn(begin, end) over a static contiguous partition of [0, n).
/// Results must not depend on the partition; with workers == 1 everything
/// runs on the calling thread.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t begin, std::size_t end)>& fn);

}  // namespace dlf
