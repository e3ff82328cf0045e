#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace flowbench::util {

// Fixed-size pool for data-parallel loops. Work is partitioned into
// contiguous index ranges assigned deterministically, so any computation
// whose range writes are disjoint produces bit-identical results for every
// thread count, including 1 (the mode the determinism suite runs in).
class ThreadPool {
public:
    explicit ThreadPool(int threads = 1) { start(threads); }
    ~ThreadPool() { stop(); }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    void resize(int threads) {
        stop();
        start(threads);
    }

    // Runs fn(begin, end) over [0, n) split into at most size() ranges.
    void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        if (n <= 0) return;
        int nt = size();
        if (nt == 1 || n == 1) {
            fn(0, n);
            return;
        }
        if (static_cast<std::int64_t>(nt) > n) nt = static_cast<int>(n);
        std::int64_t chunk = (n + nt - 1) / nt;
        pending_ = 0;
        {
            std::unique_lock lock(mu_);
            for (int t = 1; t < nt; ++t) {
                std::int64_t b = t * chunk;
                std::int64_t e = std::min<std::int64_t>(n, b + chunk);
                if (b >= e) continue;
                ++pending_;
                tasks_.push_back([=, &fn] { fn(b, e); });
            }
            cv_.notify_all();
        }
        fn(0, std::min<std::int64_t>(n, chunk));
        std::unique_lock lock(mu_);
        done_cv_.wait(lock, [&] { return pending_ == 0; });
    }

private:
    void start(int threads) {
        stopping_ = false;
        int extra = threads - 1;
        for (int i = 0; i < extra; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void stop() {
        {
            std::unique_lock lock(mu_);
            stopping_ = true;
            cv_.notify_all();
        }
        for (auto& w : workers_) w.join();
        workers_.clear();
    }

    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return stopping_ || !tasks_.empty(); });
                if (stopping_ && tasks_.empty()) return;
                task = std::move(tasks_.back());
                tasks_.pop_back();
            }
            task();
            std::unique_lock lock(mu_);
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }

    std::vector<std::thread> workers_;
    std::vector<std::function<void()>> tasks_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    int pending_ = 0;
    bool stopping_ = false;
};

// Process-wide pool used by the numeric kernels; defaults to single-threaded.
inline ThreadPool& global_pool() {
    static ThreadPool pool(1);
    return pool;
}

inline void set_num_threads(int n) { global_pool().resize(n < 1 ? 1 : n); }

}  // namespace flowbench::util
