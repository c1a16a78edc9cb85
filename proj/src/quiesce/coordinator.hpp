#pragma once

// Quiescence coordination. Managed threads register with a role-derived
// priority and call quiescence_point() at their safe states. A patch ticket
// drives one of two protocols:
//
//   global — threads block at a barrier, ordered by the priority gate (a
//   thread blocks only once every strictly-lower-priority thread already
//   blocks); when all are blocked the patcher applies the patch in place
//   and releases everyone.
//
//   local — the patcher clones the current generation, patches the clone,
//   and each thread migrates to it at its next quiescence point without
//   ever blocking.
//
// The patcher thread runs a wakeup loop that pokes sleeping workers and
// blocked listeners until synchronization, and a watchdog that aborts the
// ticket (releasing all threads unpatched) if quiescence is never reached.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "common/time_util.hpp"
#include "gen/generation_store.hpp"
#include "patch/patch.hpp"

namespace livekv::quiesce {

enum class Priority : int { Low = 0, Medium = 1, Critical = 2 };

const char* priority_name(Priority p);

enum class ThreadState { Running, BlockedAtBarrier, Sleeping, Migrated };

enum class Outcome { Passed, Migrated, ReleasedAfterGlobal, Skipped };

enum class TicketStatus { Pending, Synchronized, Failed };

using Method = patch::Method;

struct CoordConfig {
  std::chrono::milliseconds wakeup_interval{1};
  std::chrono::milliseconds watchdog{10000};
  bool priority_gate = true;  // false = naive mode: every thread blocks unconditionally
};

class CoordError : public std::runtime_error {
 public:
  enum class Code { Duplicate, Unknown, Busy, Validation, BadState, Shutdown };
  CoordError(Code code, const std::string& what) : std::runtime_error(what), code(code) {}
  Code code;
};

class Coordinator;

/// Handle for one managed thread. Created by register_thread, owned by the
/// coordinator, used only by the registering thread.
class Registration {
 public:
  std::uint64_t seq() const { return seq_; }
  const std::string& name() const { return name_; }
  Priority priority() const { return prio_.load(std::memory_order_acquire); }
  ThreadState state() const { return state_.load(std::memory_order_acquire); }
  gen::GenId generation() const { return binding_.generation(); }

 private:
  friend class Coordinator;
  std::uint64_t seq_ = 0;
  std::string name_;
  std::thread::id owner_;
  std::atomic<Priority> prio_{Priority::Low};
  std::atomic<ThreadState> state_{ThreadState::Running};
  std::function<void()> wake_;
  gen::GenBinding binding_;
};

struct ThreadSyncRecord {
  std::uint64_t thread_seq = 0;
  std::string name;
  Priority prio_at_entry = Priority::Low;
  std::uint64_t reached_barrier_us = 0;  // global; 0 = never blocked
  std::uint64_t barrier_wait_us = 0;
  std::uint64_t migrated_at_us = 0;  // local; 0 = never migrated
  std::uint64_t migrate_ns = 0;
};

struct SyncReport {
  std::uint64_t ticket_id = 0;
  Method method = Method::Global;
  std::string patch_id;
  TicketStatus status = TicketStatus::Pending;
  bool deadlock = false;
  std::uint64_t requested_at_us = 0;  // coordinator epoch
  std::uint64_t quiesced_at_us = 0;   // global: all threads at barrier
  std::uint64_t released_at_us = 0;
  std::uint64_t sync_time_us = 0;
  std::uint64_t apply_us = 0;
  std::uint64_t clone_us = 0;  // local only
  std::uint64_t pages_copied = 0;
  std::uint64_t blocked_calls = 0;  // barrier entries during this ticket
  std::uint32_t thread_count = 0;
  gen::GenId target_gen = 0;  // local only
  std::string failure_reason;
  std::vector<ThreadSyncRecord> threads;
};

struct Event {
  enum class Kind {
    Register,
    Deregister,
    Block,
    Skip,
    Migrate,
    Release,
    Abort,
    PrioChange,
    Sleep,
    Wake
  };
  Kind kind;
  std::uint64_t ts_us = 0;
  std::uint64_t thread_seq = 0;
  Priority prio = Priority::Low;
};

class Ticket {
 public:
  std::uint64_t id() const { return id_; }
  Method method() const { return method_; }
  bool done() const {
    return status_.load(std::memory_order_acquire) != TicketStatus::Pending;
  }
  TicketStatus status() const { return status_.load(std::memory_order_acquire); }

 private:
  friend class Coordinator;
  std::uint64_t id_ = 0;
  Method method_ = Method::Global;
  std::shared_ptr<const patch::PatchSpec> spec;
  std::atomic<TicketStatus> status_{TicketStatus::Pending};

  // All fields below are guarded by the coordinator mutex.
  std::uint64_t requested_at_us = 0;
  std::uint64_t quiesced_at_us = 0;
  std::uint64_t released_at_us = 0;
  std::uint64_t last_migrated_us = 0;
  std::uint64_t apply_us = 0;
  std::uint64_t clone_us = 0;
  std::uint64_t pages_copied = 0;
  std::uint64_t blocked_calls = 0;
  bool deadlock = false;
  bool target_ready = false;
  bool released = false;
  bool aborted = false;
  std::uint64_t ready_at_us = 0;
  std::string failure_reason;
  gen::GenId target_gen = 0;
  std::vector<Registration*> waiters;  // threads blocked at the barrier
  std::size_t exited = 0;
  std::map<std::uint64_t, ThreadSyncRecord> records;
  std::vector<Event> log;
  std::condition_variable cv_barrier;
  std::condition_variable cv_patcher;
  std::thread patcher;
};

class Coordinator {
 public:
  Coordinator(gen::GenerationStore& store, CoordConfig config);
  ~Coordinator();

  Coordinator(const Coordinator&) = delete;
  Coordinator& operator=(const Coordinator&) = delete;

  /// Called by the managed thread itself before serving work. The wake
  /// callback must be cheap and non-blocking; it interrupts the thread's
  /// current idle wait (socket poll, queue wait, cache sleep).
  Registration& register_thread(std::string name, Priority prio, std::function<void()> wake);
  void deregister_thread(Registration& reg);

  void set_priority(Registration& reg, Priority prio);
  void notify_sleep(Registration& reg);
  void notify_wake(Registration& reg);

  /// The quiescence point. Fast path (no active ticket, bound to the
  /// current generation) is two atomic loads.
  Outcome quiescence_point(Registration& reg);

  std::shared_ptr<Ticket> request_patch(std::shared_ptr<const patch::PatchSpec> spec,
                                        Method method);
  SyncReport await_sync(const std::shared_ptr<Ticket>& ticket);
  bool wait_done_for(const std::shared_ptr<Ticket>& ticket, std::chrono::milliseconds dur);
  SyncReport report_of(const std::shared_ptr<Ticket>& ticket) const;
  std::vector<Event> events_of(const std::shared_ptr<Ticket>& ticket) const;

  bool ticket_active() const { return ticket_raw_.load(std::memory_order_acquire) != nullptr; }
  std::shared_ptr<Ticket> last_ticket() const;

  /// Blocks while a global ticket is in flight (used to park brand-new
  /// connection threads until release).
  void wait_no_global_ticket();

  std::size_t registered_count() const;
  std::uint64_t tickets_started() const { return next_ticket_id_ - 1; }
  std::uint64_t deadlocks() const { return deadlocks_.load(std::memory_order_relaxed); }
  const CoordConfig& config() const { return config_; }
  TimePoint epoch() const { return epoch_; }

  /// Aborts any active ticket and unblocks every waiter. New tickets are
  /// refused afterwards.
  void shutdown();

 private:
  void run_patcher_global(std::shared_ptr<Ticket> t);
  void run_patcher_local(std::shared_ptr<Ticket> t);
  bool all_blocked_locked() const;
  bool all_migrated_locked(const Ticket& t) const;
  void wake_pending_locked(const Ticket& t, bool global);
  void finish_ticket_locked(Ticket& t, TicketStatus status);
  ThreadSyncRecord& record_locked(Ticket& t, Registration& reg);
  SyncReport report_locked(const Ticket& t) const;
  void log_locked(Ticket& t, Event::Kind kind, const Registration* reg);
  std::uint64_t ts() const { return us_since(epoch_); }

  gen::GenerationStore& store_;
  CoordConfig config_;
  TimePoint epoch_;

  mutable std::mutex mu_;
  std::condition_variable cv_done_;
  std::map<std::uint64_t, std::unique_ptr<Registration>> registry_;
  std::map<std::thread::id, std::uint64_t> by_thread_;
  std::shared_ptr<Ticket> active_;
  std::shared_ptr<Ticket> last_;
  std::atomic<Ticket*> ticket_raw_{nullptr};
  std::uint64_t next_seq_ = 1;
  std::uint64_t next_ticket_id_ = 1;
  std::atomic<std::uint64_t> deadlocks_{0};
  bool shutdown_ = false;
};

}  // namespace livekv::quiesce
