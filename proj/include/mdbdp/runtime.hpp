#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mdbdp {

/// Training allocates and frees many same-sized d x K buffers per iteration.
/// glibc serves blocks above 128 KiB with mmap/munmap by default, which makes
/// every such buffer a pair of system calls; keep them on the heap instead.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

} // namespace mdbdp
