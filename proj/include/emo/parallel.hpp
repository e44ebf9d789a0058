#pragma once

#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emo {

// Thread-count control for the OpenMP kernels. Resolution order:
// explicit set_threads() (CLI --threads), else EMO_THREADS, else OpenMP default.
inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void init_threads_from_env() {
    if (const char* env = std::getenv("EMO_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) set_threads(n);
    }
}

} // namespace emo
