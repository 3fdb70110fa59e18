#pragma once

#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mapfuse {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / channel-count mismatches and invalid geometry.
struct DimensionError : Error {
    using Error::Error;
};
// Malformed or truncated files.
struct FormatError : Error {
    using Error::Error;
};
// Class ids outside the declared class table.
struct LabelError : Error {
    using Error::Error;
};
// Patch sampling exhausted its retry budget.
struct SamplingError : Error {
    using Error::Error;
};
// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
    using Error::Error;
};
// Out-of-range indices in structures that must be internally consistent.
struct CorruptionError : Error {
    using Error::Error;
};
// API misuse (e.g. stepping an optimizer with no gradients).
struct UsageError : Error {
    using Error::Error;
};

inline void check_finite(const float* data, size_t n, const char* what) {
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(data[i]))
            throw NumericError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
}

// ---------------------------------------------------------------------------
// Persistent worker pool. Work items are handed out by index under a lock and
// tagged with a task generation, so results never depend on the pool size and
// a late-waking worker can never run items of a newer task with a stale
// function pointer. Reductions must go through per-item buffers combined in
// index order by the caller.
// ---------------------------------------------------------------------------
class ThreadPool {
  public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void resize(int n) {
        stop_workers();
        n_threads_ = n < 1 ? 1 : n;
        start_workers();
    }

    int size() const { return n_threads_; }

    // Runs fn(i) for i in [0, n). Blocks until all items complete.
    void for_each(int64_t n, const std::function<void(int64_t)>& fn) {
        if (n <= 0) return;
        if (n_threads_ == 1 || n == 1 || workers_.empty()) {
            for (int64_t i = 0; i < n; ++i) fn(i);
            return;
        }
        uint64_t gen;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            task_ = &fn;
            task_total_ = n;
            task_next_ = 0;
            task_done_ = 0;
            gen = ++generation_;
        }
        cv_.notify_all();
        run_items(gen);
        std::unique_lock<std::mutex> lock(mutex_);
        done_cv_.wait(lock, [&] { return task_done_ == task_total_; });
        task_ = nullptr;
    }

    ~ThreadPool() { stop_workers(); }

  private:
    ThreadPool() {
        const char* env = std::getenv("MAPFUSE_THREADS");
        int n = 0;
        if (env) n = std::atoi(env);
        if (n < 1) {
            unsigned hw = std::thread::hardware_concurrency();
            n = static_cast<int>(hw == 0 ? 1 : (hw > 4 ? 4 : hw));
        }
        n_threads_ = n;
        start_workers();
    }

    // Pulls items of generation `gen` until that task is exhausted.
    void run_items(uint64_t gen) {
        for (;;) {
            int64_t i;
            const std::function<void(int64_t)>* fn;
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (generation_ != gen || task_next_ >= task_total_) return;
                i = task_next_++;
                fn = task_;
            }
            (*fn)(i);
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (generation_ == gen && ++task_done_ == task_total_) done_cv_.notify_all();
            }
        }
    }

    void start_workers() {
        stop_ = false;
        for (int t = 1; t < n_threads_; ++t) {
            workers_.emplace_back([this] {
                uint64_t seen = 0;
                for (;;) {
                    uint64_t gen;
                    {
                        std::unique_lock<std::mutex> lock(mutex_);
                        cv_.wait(lock, [&] {
                            return stop_ || (task_ && generation_ != seen && task_next_ < task_total_);
                        });
                        if (stop_) return;
                        gen = generation_;
                        seen = gen;
                    }
                    run_items(gen);
                }
            });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
        workers_.clear();
    }

    std::mutex mutex_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(int64_t)>* task_ = nullptr;
    int64_t task_total_ = 0, task_next_ = 0, task_done_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
    int n_threads_ = 1;
};

inline void set_threads(int n) { ThreadPool::instance().resize(n); }

inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    ThreadPool::instance().for_each(n, fn);
}

// ---------------------------------------------------------------------------
// Little-endian encode/decode, independent of host byte order.
// ---------------------------------------------------------------------------
inline void put_u16_le(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32_le(std::string& out, float f) {
    uint32_t v;
    static_assert(sizeof(v) == sizeof(f));
    std::memcpy(&v, &f, 4);
    put_u32_le(out, v);
}
inline uint16_t get_u16_le(const unsigned char* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
inline uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline float get_f32_le(const unsigned char* p) {
    uint32_t v = get_u32_le(p);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace mapfuse
