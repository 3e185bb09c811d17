#include "cbff/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace cbff::threading {
namespace {

int g_workers = 0;

// Lazily started pool. Threads persist once created; resizing joins and
// restarts. Tasks are dispatched as (index, total) pairs per job.
class Pool {
 public:
  ~Pool() { stop(); }

  void resize(int n) {
    std::unique_lock lk(control_);
    if (n == int(threads_.size())) return;
    stop_locked();
    for (int i = 0; i < n; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  int size() {
    std::unique_lock lk(control_);
    return int(threads_.size());
  }

  // Runs fn(t) for t in [0, nthreads) on the pool threads plus the caller.
  void run(const std::function<void(int, int)>& fn) {
    std::unique_lock lk(control_);
    int n = int(threads_.size());
    {
      std::unique_lock jl(job_mutex_);
      job_ = &fn;
      job_total_ = n + 1;
      job_done_ = 0;
      ++job_id_;
    }
    job_cv_.notify_all();
    fn(0, n + 1);
    {
      std::unique_lock jl(job_mutex_);
      ++job_done_;
      done_cv_.wait(jl, [&] { return job_done_ == job_total_; });
      job_ = nullptr;
    }
  }

 private:
  void stop() {
    std::unique_lock lk(control_);
    stop_locked();
  }

  void stop_locked() {
    {
      std::unique_lock jl(job_mutex_);
      quit_ = true;
    }
    job_cv_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
    quit_ = false;
  }

  void worker_loop(int idx) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int, int)>* job = nullptr;
      int total = 0;
      {
        std::unique_lock jl(job_mutex_);
        job_cv_.wait(jl, [&] { return quit_ || (job_ && job_id_ != seen); });
        if (quit_) return;
        seen = job_id_;
        job = job_;
        total = job_total_;
      }
      (*job)(idx + 1, total);
      {
        std::unique_lock jl(job_mutex_);
        ++job_done_;
      }
      done_cv_.notify_all();
    }
  }

  std::mutex control_;
  std::vector<std::thread> threads_;

  std::mutex job_mutex_;
  std::condition_variable job_cv_;
  std::condition_variable done_cv_;
  const std::function<void(int, int)>* job_ = nullptr;
  uint64_t job_id_ = 0;
  int job_total_ = 0;
  int job_done_ = 0;
  bool quit_ = false;
};

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

void set_workers(int n) {
  if (n < 0) n = 0;
  g_workers = n;
  // Pool holds workers-1 threads; the calling thread participates.
  pool().resize(n > 1 ? n - 1 : 0);
}

int workers() { return g_workers; }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int w = g_workers;
  if (w <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  int parts = int(std::min<int64_t>(w, n));
  pool().run([&](int t, int total) {
    // Static contiguous split; deterministic regardless of thread timing.
    (void)total;
    if (t >= parts) return;
    int64_t chunk = (n + parts - 1) / parts;
    int64_t b = t * chunk;
    int64_t e = std::min<int64_t>(n, b + chunk);
    if (b < e) fn(b, e);
  });
}

}  // namespace cbff::threading
