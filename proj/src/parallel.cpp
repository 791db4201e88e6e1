#include "parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace ddpm {
namespace {

class Pool {
 public:
  Pool() {
    unsigned hw = std::thread::hardware_concurrency();
    int extra = std::max(1, std::min<int>(hw ? (int)hw : 1, 16)) - 1;
    for (int i = 0; i < extra; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::unique_lock<std::mutex> lk(m_);
      quit_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  int width() const { return (int)workers_.size() + 1; }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int chunks = (int)std::min<int64_t>(width(), n);
    if (chunks == 1) {
      fn(0, n);
      return;
    }
    int64_t step = (n + chunks - 1) / chunks;
    {
      std::unique_lock<std::mutex> lk(m_);
      fn_ = &fn;
      total_ = n;
      step_ = step;
      next_chunk_ = 1;
      chunk_count_ = chunks;
      pending_ = chunks - 1;
      ++generation_;
    }
    cv_.notify_all();
    fn(0, std::min<int64_t>(step, n));
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(m_);
      cv_.wait(lk, [&] { return quit_ || generation_ != seen; });
      if (quit_) return;
      seen = generation_;
      for (;;) {
        int c = next_chunk_;
        if (c >= chunk_count_) break;
        ++next_chunk_;
        int64_t b = (int64_t)c * step_;
        int64_t e = std::min<int64_t>(b + step_, total_);
        const auto* fn = fn_;
        lk.unlock();
        (*fn)(b, e);
        lk.lock();
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  int64_t total_ = 0, step_ = 0;
  int next_chunk_ = 0, chunk_count_ = 0, pending_ = 0;
  uint64_t generation_ = 0;
  bool quit_ = false;
};

Pool& pool() {
  static Pool p;
  return p;
}

}  // namespace

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  pool().run(n, fn);
}

int worker_count() { return pool().width(); }

}  // namespace ddpm
