#include "gafm/runtime.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace gafm {

namespace {

int read_thread_cap() {
    const char* env = std::getenv("GAFM_THREADS");
    if (env == nullptr) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 256));
}

// Minimal long-lived pool; submit() enqueues, wait_idle() blocks until all
// submitted tasks have finished.
class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void submit(std::function<void()> task) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            ++pending_;
            queue_.push(std::move(task));
        }
        cv_.notify_one();
    }

    void wait_idle() {
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
    }

private:
    void worker() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
                if (stop_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop();
            }
            task();
            {
                std::lock_guard<std::mutex> lock(mu_);
                --pending_;
            }
            done_cv_.notify_all();
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::queue<std::function<void()>> queue_;
    std::vector<std::thread> threads_;
    size_t pending_ = 0;
    bool stop_ = false;
};

Pool* pool() {
    static Pool p(read_thread_cap() - 1);
    return &p;
}

}  // namespace

int max_threads() {
    static const int cap = read_thread_cap();
    return cap;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    const int threads = max_threads();
    if (threads <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    const int chunks = static_cast<int>(std::min<int64_t>(threads, n));
    const int64_t per = (n + chunks - 1) / chunks;
    Pool* p = pool();
    for (int c = 1; c < chunks; ++c) {
        const int64_t b = c * per;
        const int64_t e = std::min<int64_t>(n, b + per);
        if (b >= e) continue;
        p->submit([&fn, b, e] { fn(b, e); });
    }
    // First chunk runs on the calling thread while the pool works the rest.
    fn(0, std::min<int64_t>(n, per));
    p->wait_idle();
}

}  // namespace gafm
