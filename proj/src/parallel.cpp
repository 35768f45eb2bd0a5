#include "morphnn/parallel.hpp"

#include <cstdlib>

namespace morphnn {

int worker_count() {
    static int workers = [] {
        if (const char* env = std::getenv("MORPHNN_THREADS")) {
            int n = std::atoi(env);
            if (n >= 1) return n;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }();
    return workers;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    std::size_t workers = static_cast<std::size_t>(worker_count());
    if (workers <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    workers = std::min(workers, n);
    std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        threads.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    fn(0, std::min(chunk, n));
    for (auto& t : threads) t.join();
}

} // namespace morphnn
