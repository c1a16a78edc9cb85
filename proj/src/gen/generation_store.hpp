#pragma once

// Versioned code generations: each generation is a dispatch table over a
// page-indexed byte store. Cloning a generation copies the page index
// entry-by-entry (8 bytes per 4096-byte page); pinned code pages become
// copy-on-write in the clone, everything else stays a shared mapping.
// Clone and patch-apply durations are measured on the actual copies so the
// cost model stays physical.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace livekv::gen {

inline constexpr std::size_t kPageSize = 4096;
inline constexpr std::size_t kIndexEntrySize = 8;  // one page-table entry

using GenId = std::uint64_t;
using PageId = std::uint64_t;
using FunctionId = std::uint32_t;

struct PageRange {
  PageId first = 0;
  PageId last = 0;  // inclusive
};

/// Version-0 declaration of a patchable function.
struct FunctionDecl {
  std::string name;
  std::string tag;
  std::vector<unsigned char> blob;
};

/// One function replacement inside a patch.
struct Replacement {
  FunctionId function = 0;
  std::string tag;
  std::vector<unsigned char> blob;
};

struct ResolvedBehavior {
  FunctionId function = 0;
  std::uint32_t version = 0;
  std::string tag;
};

struct CloneReport {
  GenId gen = 0;
  std::uint64_t entries_copied = 0;
  std::uint64_t bytes_copied = 0;  // entries * kIndexEntrySize
  std::chrono::nanoseconds index_copy_time{0};
};

struct ApplyReport {
  std::chrono::nanoseconds duration{0};
  std::uint64_t pages_copied = 0;  // COW copies triggered by the writes
  std::uint64_t bytes_written = 0;
};

struct MigrateReport {
  GenId from = 0;
  GenId to = 0;
  std::chrono::nanoseconds duration{0};
};

class StoreError : public std::runtime_error {
 public:
  explicit StoreError(const std::string& what) : std::runtime_error(what) {}
};

/// A managed thread's binding to a generation. Owned by whoever registered
/// the thread; the store adjusts it on bind/migrate/unbind.
class GenBinding {
 public:
  GenId generation() const { return gen_.load(std::memory_order_acquire); }
  bool bound() const { return bound_.load(std::memory_order_acquire); }

 private:
  friend class GenerationStore;
  std::atomic<GenId> gen_{0};
  std::atomic<bool> bound_{false};
};

/// Immutable registry of the patchable functions (dense ids).
class FunctionTable {
 public:
  explicit FunctionTable(std::vector<std::string> names);
  std::optional<FunctionId> id_of(std::string_view name) const;
  const std::string& name_of(FunctionId f) const;
  std::size_t size() const { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, FunctionId> by_name_;
};

class GenerationStore {
 public:
  /// Builds generation 0 with every function at version 0. The version-0
  /// blobs are packed contiguously into the code pages.
  GenerationStore(std::vector<FunctionDecl> functions, std::size_t code_page_count,
                  std::size_t max_data_pages = 1u << 20);

  GenerationStore(const GenerationStore&) = delete;
  GenerationStore& operator=(const GenerationStore&) = delete;

  // ---- control plane (single patcher/control thread at a time) ----

  /// Marks code-page ranges read-only/COW for subsequent clones. Idempotent.
  void pin(const std::vector<PageRange>& ranges);

  /// Copies the page index of `from` into a fresh generation. All resolve and
  /// page-access callers pause for the duration of the index copy.
  CloneReport clone_generation(GenId from);

  /// Applies replacements to a freshly cloned, thread-free generation.
  /// Affected pinned pages are COW-copied, payload bytes are written in, and
  /// the dispatch entries are bumped to the next version.
  ApplyReport apply_patch_to_generation(GenId gen, std::span<const Replacement> reps,
                                        const std::string& patch_label);

  /// Applies replacements to the current generation in place (global
  /// quiescence path: the caller guarantees no managed thread is running).
  ApplyReport apply_patch_in_place(std::span<const Replacement> reps,
                                   const std::string& patch_label);

  /// Releases a generation with no bound threads. The newest (current)
  /// generation cannot be retired.
  void retire_generation(GenId gen);

  /// Retires every non-current generation whose refcount is zero.
  std::size_t retire_idle_generations();

  void set_current_generation(GenId gen);

  // ---- data plane (any thread) ----

  ResolvedBehavior resolve(GenId gen, FunctionId f) const;

  MigrateReport migrate(GenBinding& binding, GenId to);
  void bind(GenBinding& binding);    // binds to the current generation
  void unbind(GenBinding& binding);

  GenId current_generation() const { return current_.load(std::memory_order_acquire); }

  // Byte access through a generation. Writes to pinned pages whose frame is
  // shared trigger a COW copy; writes to unpinned pages land in the shared
  // frame and are visible through every generation.
  void write_page(GenId gen, PageId page, std::size_t offset,
                  std::span<const unsigned char> bytes);
  void read_page(GenId gen, PageId page, std::size_t offset,
                 std::span<unsigned char> out) const;

  /// False once `gen` has privately rewritten (COW-copied) the page.
  bool page_shared(GenId gen, PageId page) const;

  // Data-page region: always shared mapping, never pinnable. Used by the
  // key-value engine so that clone cost scales with database state.
  PageId grow_data_pages(std::size_t count);
  void write_data(PageId page, std::size_t offset, std::span<const unsigned char> bytes);
  void read_data(PageId page, std::size_t offset, std::span<unsigned char> out) const;

  // ---- introspection ----

  const FunctionTable& functions() const { return functions_; }
  std::size_t code_page_count() const { return code_pages_; }
  std::size_t data_page_count() const;
  std::size_t total_page_count() const;
  std::size_t live_generations() const;
  bool is_live(GenId gen) const;
  std::int64_t refcount(GenId gen) const;
  std::optional<GenId> parent_of(GenId gen) const;
  std::optional<std::string> patch_label_of(GenId gen) const;
  std::vector<GenId> live_generation_ids() const;

 private:
  struct Frame {
    std::unique_ptr<std::array<unsigned char, kPageSize>> data;
    std::uint32_t refs = 0;
  };

  struct DispatchEntry {
    std::uint32_t version = 0;
    std::string tag;
    std::uint64_t offset = 0;  // byte offset into the code region
    std::uint64_t length = 0;
  };

  struct Generation {
    GenId id = 0;
    std::optional<GenId> parent;
    std::vector<std::uint64_t> page_table;  // page -> frame index
    std::vector<DispatchEntry> dispatch;
    std::vector<bool> pinned;               // code pages only
    std::unordered_set<PageId> private_pages;
    std::atomic<std::int64_t> refcount{0};
    std::optional<std::string> patch_label;
    std::uint64_t code_tail = 0;  // first free byte in the code region
  };

  std::uint64_t alloc_frame_locked();
  void deref_frame_locked(std::uint64_t frame);
  Generation& gen_locked(GenId id);
  const Generation& gen_locked(GenId id) const;
  ApplyReport apply_locked(Generation& g, std::span<const Replacement> reps);
  void write_through_locked(Generation& g, PageId page, std::size_t offset,
                            std::span<const unsigned char> bytes, ApplyReport* report);
  void check_patchable_locked(const Generation& g, std::span<const Replacement> reps) const;

  FunctionTable functions_;
  std::size_t code_pages_ = 0;
  std::size_t max_data_pages_ = 0;

  mutable std::shared_mutex mu_;   // data plane shared, structural changes exclusive
  std::mutex control_mu_;          // serializes control-plane operations
  std::deque<Frame> frames_;
  std::vector<std::uint64_t> free_frames_;
  std::map<GenId, std::unique_ptr<Generation>> generations_;
  std::size_t data_pages_ = 0;
  GenId next_gen_id_ = 1;
  std::atomic<GenId> current_{0};
};

}  // namespace livekv::gen
