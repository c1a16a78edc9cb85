#include "gen/generation_store.hpp"

#include <algorithm>
#include <cstring>

#include "common/time_util.hpp"

namespace livekv::gen {

FunctionTable::FunctionTable(std::vector<std::string> names) : names_(std::move(names)) {
  for (FunctionId i = 0; i < names_.size(); ++i) {
    if (!by_name_.emplace(names_[i], i).second) {
      throw StoreError("duplicate function name: " + names_[i]);
    }
  }
}

std::optional<FunctionId> FunctionTable::id_of(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

const std::string& FunctionTable::name_of(FunctionId f) const {
  if (f >= names_.size()) throw StoreError("unknown function id");
  return names_[f];
}

GenerationStore::GenerationStore(std::vector<FunctionDecl> functions,
                                 std::size_t code_page_count, std::size_t max_data_pages)
    : functions_([&] {
        std::vector<std::string> names;
        names.reserve(functions.size());
        for (const auto& f : functions) names.push_back(f.name);
        return FunctionTable(std::move(names));
      }()),
      code_pages_(code_page_count),
      max_data_pages_(max_data_pages) {
  if (functions.empty()) throw StoreError("empty function table");
  std::uint64_t total_blob = 0;
  for (const auto& f : functions) total_blob += f.blob.size();
  if (total_blob > static_cast<std::uint64_t>(code_pages_) * kPageSize) {
    throw StoreError("capacity: version-0 blobs exceed code pages");
  }

  auto g = std::make_unique<Generation>();
  g->id = 0;
  g->page_table.resize(code_pages_);
  g->pinned.assign(code_pages_, false);
  for (std::size_t p = 0; p < code_pages_; ++p) {
    std::uint64_t frame = frames_.size();
    frames_.push_back(Frame{std::make_unique<std::array<unsigned char, kPageSize>>(), 1});
    frames_.back().data->fill(0);
    g->page_table[p] = frame;
  }

  // Pack version-0 blobs byte-contiguously into the code region.
  std::uint64_t cursor = 0;
  for (FunctionId f = 0; f < functions.size(); ++f) {
    const auto& decl = functions[f];
    DispatchEntry entry;
    entry.version = 0;
    entry.tag = decl.tag;
    entry.offset = cursor;
    entry.length = decl.blob.size();
    std::uint64_t written = 0;
    while (written < decl.blob.size()) {
      const PageId page = (cursor + written) / kPageSize;
      const std::size_t off = (cursor + written) % kPageSize;
      const std::size_t n = std::min(kPageSize - off, decl.blob.size() - written);
      std::memcpy(frames_[g->page_table[page]].data->data() + off,
                  decl.blob.data() + written, n);
      written += n;
    }
    cursor += decl.blob.size();
    g->dispatch.push_back(std::move(entry));
  }
  g->code_tail = cursor;

  generations_.emplace(0, std::move(g));
  current_.store(0, std::memory_order_release);
}

GenerationStore::Generation& GenerationStore::gen_locked(GenId id) {
  auto it = generations_.find(id);
  if (it == generations_.end()) throw StoreError("unknown generation " + std::to_string(id));
  return *it->second;
}

const GenerationStore::Generation& GenerationStore::gen_locked(GenId id) const {
  auto it = generations_.find(id);
  if (it == generations_.end()) throw StoreError("unknown generation " + std::to_string(id));
  return *it->second;
}

std::uint64_t GenerationStore::alloc_frame_locked() {
  if (!free_frames_.empty()) {
    std::uint64_t idx = free_frames_.back();
    free_frames_.pop_back();
    frames_[idx].refs = 1;
    return idx;
  }
  std::uint64_t idx = frames_.size();
  frames_.push_back(Frame{std::make_unique<std::array<unsigned char, kPageSize>>(), 1});
  return idx;
}

void GenerationStore::deref_frame_locked(std::uint64_t frame) {
  Frame& f = frames_[frame];
  if (f.refs == 0) throw StoreError("frame refcount underflow");
  if (--f.refs == 0) free_frames_.push_back(frame);
}

void GenerationStore::pin(const std::vector<PageRange>& ranges) {
  std::scoped_lock control(control_mu_);
  std::unique_lock lk(mu_);
  Generation& g = gen_locked(current_.load(std::memory_order_relaxed));
  for (const auto& r : ranges) {
    if (r.last < r.first || r.last >= code_pages_) {
      throw StoreError("pin range out of code region");
    }
    for (PageId p = r.first; p <= r.last; ++p) g.pinned[p] = true;
  }
}

CloneReport GenerationStore::clone_generation(GenId from) {
  std::scoped_lock control(control_mu_);
  std::unique_lock lk(mu_);
  Generation& src = gen_locked(from);

  auto child = std::make_unique<Generation>();
  child->id = next_gen_id_++;
  child->parent = from;
  child->pinned = src.pinned;
  child->code_tail = src.code_tail;
  child->page_table.resize(src.page_table.size());

  // The measurable linear cost: one index entry copied (and its frame
  // reference bumped) per page, while data-plane callers are paused.
  const TimePoint t0 = now();
  const std::size_t n = src.page_table.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t e = src.page_table[i];
    child->page_table[i] = e;
    ++frames_[e].refs;
  }
  const TimePoint t1 = now();

  child->dispatch = src.dispatch;

  CloneReport report;
  report.gen = child->id;
  report.entries_copied = n;
  report.bytes_copied = static_cast<std::uint64_t>(n) * kIndexEntrySize;
  report.index_copy_time = t1 - t0;
  generations_.emplace(child->id, std::move(child));
  return report;
}

void GenerationStore::check_patchable_locked(const Generation& g,
                                             std::span<const Replacement> reps) const {
  std::uint64_t tail = g.code_tail;
  const std::uint64_t code_bytes = static_cast<std::uint64_t>(code_pages_) * kPageSize;
  for (const auto& rep : reps) {
    if (rep.function >= g.dispatch.size()) throw StoreError("unknown function id in patch");
    const DispatchEntry& entry = g.dispatch[rep.function];
    std::uint64_t offset;
    if (rep.blob.size() <= entry.length) {
      offset = entry.offset;
    } else {
      offset = tail;
      tail += rep.blob.size();
      if (tail > code_bytes) throw StoreError("capacity: patch exceeds code pages");
    }
    if (!rep.blob.empty()) {
      const PageId first = offset / kPageSize;
      const PageId last = (offset + rep.blob.size() - 1) / kPageSize;
      for (PageId p = first; p <= last; ++p) {
        if (!g.pinned[p]) {
          throw StoreError("not patchable: outside read-only region");
        }
      }
    }
  }
}

void GenerationStore::write_through_locked(Generation& g, PageId page, std::size_t offset,
                                           std::span<const unsigned char> bytes,
                                           ApplyReport* report) {
  if (offset + bytes.size() > kPageSize) throw StoreError("page write out of bounds");
  std::uint64_t frame = g.page_table[page];
  const bool pinned = page < code_pages_ && g.pinned[page];
  if (pinned && frames_[frame].refs > 1) {
    const std::uint64_t copy = alloc_frame_locked();
    *frames_[copy].data = *frames_[frame].data;
    --frames_[frame].refs;
    g.page_table[page] = copy;
    g.private_pages.insert(page);
    frame = copy;
    if (report) ++report->pages_copied;
  }
  std::memcpy(frames_[frame].data->data() + offset, bytes.data(), bytes.size());
}

ApplyReport GenerationStore::apply_locked(Generation& g, std::span<const Replacement> reps) {
  check_patchable_locked(g, reps);

  ApplyReport report;
  const TimePoint t0 = now();
  for (const auto& rep : reps) {
    DispatchEntry& entry = g.dispatch[rep.function];
    std::uint64_t offset;
    if (rep.blob.size() <= entry.length) {
      offset = entry.offset;
    } else {
      offset = g.code_tail;
      g.code_tail += rep.blob.size();
    }
    std::uint64_t written = 0;
    while (written < rep.blob.size()) {
      const PageId page = (offset + written) / kPageSize;
      const std::size_t off = (offset + written) % kPageSize;
      const std::size_t n = std::min(kPageSize - off, rep.blob.size() - written);
      write_through_locked(g, page, off, std::span(rep.blob.data() + written, n), &report);
      written += n;
    }
    entry.version += 1;
    entry.tag = rep.tag;
    entry.offset = offset;
    entry.length = rep.blob.size();
    report.bytes_written += rep.blob.size();
  }
  report.duration = now() - t0;
  return report;
}

ApplyReport GenerationStore::apply_patch_to_generation(GenId gen,
                                                       std::span<const Replacement> reps,
                                                       const std::string& patch_label) {
  std::scoped_lock control(control_mu_);
  std::unique_lock lk(mu_);
  Generation& g = gen_locked(gen);
  if (gen == 0 || !g.parent.has_value()) {
    throw StoreError("generation was not produced by clone");
  }
  if (g.patch_label.has_value()) throw StoreError("generation already patched");
  if (g.refcount.load(std::memory_order_relaxed) != 0) {
    throw StoreError("live threads bound to generation");
  }
  ApplyReport report = apply_locked(g, reps);
  g.patch_label = patch_label;
  return report;
}

ApplyReport GenerationStore::apply_patch_in_place(std::span<const Replacement> reps,
                                                  const std::string& patch_label) {
  std::scoped_lock control(control_mu_);
  std::unique_lock lk(mu_);
  Generation& g = gen_locked(current_.load(std::memory_order_relaxed));
  ApplyReport report = apply_locked(g, reps);
  g.patch_label = patch_label;
  return report;
}

void GenerationStore::retire_generation(GenId gen) {
  std::scoped_lock control(control_mu_);
  std::unique_lock lk(mu_);
  auto it = generations_.find(gen);
  if (it == generations_.end()) throw StoreError("unknown generation " + std::to_string(gen));
  Generation& g = *it->second;
  if (g.refcount.load(std::memory_order_relaxed) != 0) throw StoreError("live threads");
  if (gen == current_.load(std::memory_order_relaxed)) {
    throw StoreError("cannot retire the current generation");
  }
  for (std::uint64_t frame : g.page_table) deref_frame_locked(frame);
  generations_.erase(it);
}

std::size_t GenerationStore::retire_idle_generations() {
  std::vector<GenId> victims;
  {
    std::shared_lock lk(mu_);
    const GenId cur = current_.load(std::memory_order_relaxed);
    for (const auto& [id, g] : generations_) {
      if (id != cur && g->refcount.load(std::memory_order_relaxed) == 0) {
        victims.push_back(id);
      }
    }
  }
  std::size_t retired = 0;
  for (GenId id : victims) {
    try {
      retire_generation(id);
      ++retired;
    } catch (const StoreError&) {
      // raced with a rebind; leave it
    }
  }
  return retired;
}

void GenerationStore::set_current_generation(GenId gen) {
  std::shared_lock lk(mu_);
  gen_locked(gen);
  current_.store(gen, std::memory_order_release);
}

ResolvedBehavior GenerationStore::resolve(GenId gen, FunctionId f) const {
  std::shared_lock lk(mu_);
  const Generation& g = gen_locked(gen);
  if (f >= g.dispatch.size()) throw StoreError("unknown function id");
  const DispatchEntry& e = g.dispatch[f];
  return ResolvedBehavior{f, e.version, e.tag};
}

MigrateReport GenerationStore::migrate(GenBinding& binding, GenId to) {
  std::shared_lock lk(mu_);
  if (!binding.bound()) throw StoreError("binding not bound");
  const TimePoint t0 = now();
  const GenId from = binding.gen_.load(std::memory_order_relaxed);
  MigrateReport report;
  report.from = from;
  report.to = to;
  if (from != to) {
    Generation& dst = gen_locked(to);
    Generation& src = gen_locked(from);
    dst.refcount.fetch_add(1, std::memory_order_relaxed);
    src.refcount.fetch_sub(1, std::memory_order_relaxed);
    binding.gen_.store(to, std::memory_order_release);
  }
  report.duration = now() - t0;
  return report;
}

void GenerationStore::bind(GenBinding& binding) {
  std::shared_lock lk(mu_);
  if (binding.bound()) throw StoreError("binding already bound");
  const GenId cur = current_.load(std::memory_order_relaxed);
  gen_locked(cur).refcount.fetch_add(1, std::memory_order_relaxed);
  binding.gen_.store(cur, std::memory_order_release);
  binding.bound_.store(true, std::memory_order_release);
}

void GenerationStore::unbind(GenBinding& binding) {
  std::shared_lock lk(mu_);
  if (!binding.bound()) return;
  const GenId g = binding.gen_.load(std::memory_order_relaxed);
  gen_locked(g).refcount.fetch_sub(1, std::memory_order_relaxed);
  binding.bound_.store(false, std::memory_order_release);
}

void GenerationStore::write_page(GenId gen, PageId page, std::size_t offset,
                                 std::span<const unsigned char> bytes) {
  std::unique_lock lk(mu_);
  Generation& g = gen_locked(gen);
  if (page >= g.page_table.size()) throw StoreError("page out of range");
  write_through_locked(g, page, offset, bytes, nullptr);
}

void GenerationStore::read_page(GenId gen, PageId page, std::size_t offset,
                                std::span<unsigned char> out) const {
  std::shared_lock lk(mu_);
  const Generation& g = gen_locked(gen);
  if (page >= g.page_table.size()) throw StoreError("page out of range");
  if (offset + out.size() > kPageSize) throw StoreError("page read out of bounds");
  std::memcpy(out.data(), frames_[g.page_table[page]].data->data() + offset, out.size());
}

bool GenerationStore::page_shared(GenId gen, PageId page) const {
  std::shared_lock lk(mu_);
  const Generation& g = gen_locked(gen);
  if (page >= g.page_table.size()) throw StoreError("page out of range");
  return g.private_pages.find(page) == g.private_pages.end();
}

PageId GenerationStore::grow_data_pages(std::size_t count) {
  std::unique_lock lk(mu_);
  if (data_pages_ + count > max_data_pages_) {
    throw StoreError("capacity: data page limit exceeded");
  }
  const PageId first = code_pages_ + data_pages_;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t frame = alloc_frame_locked();
    frames_[frame].refs = 0;
    for (auto& [id, g] : generations_) {
      g->page_table.push_back(frame);
      ++frames_[frame].refs;
    }
  }
  data_pages_ += count;
  return first;
}

void GenerationStore::write_data(PageId page, std::size_t offset,
                                 std::span<const unsigned char> bytes) {
  std::shared_lock lk(mu_);
  if (page < code_pages_ || page >= code_pages_ + data_pages_) {
    throw StoreError("data page out of range");
  }
  if (offset + bytes.size() > kPageSize) throw StoreError("page write out of bounds");
  // Data pages are shared mappings; every live generation maps the same
  // frame, so writing through any one of them is equivalent. Callers
  // serialize writes to the same page.
  const Generation& g = *generations_.begin()->second;
  std::memcpy(frames_[g.page_table[page]].data->data() + offset, bytes.data(), bytes.size());
}

void GenerationStore::read_data(PageId page, std::size_t offset,
                                std::span<unsigned char> out) const {
  std::shared_lock lk(mu_);
  if (page < code_pages_ || page >= code_pages_ + data_pages_) {
    throw StoreError("data page out of range");
  }
  if (offset + out.size() > kPageSize) throw StoreError("page read out of bounds");
  const Generation& g = *generations_.begin()->second;
  std::memcpy(out.data(), frames_[g.page_table[page]].data->data() + offset, out.size());
}

std::size_t GenerationStore::data_page_count() const {
  std::shared_lock lk(mu_);
  return data_pages_;
}

std::size_t GenerationStore::total_page_count() const {
  std::shared_lock lk(mu_);
  return code_pages_ + data_pages_;
}

std::size_t GenerationStore::live_generations() const {
  std::shared_lock lk(mu_);
  return generations_.size();
}

bool GenerationStore::is_live(GenId gen) const {
  std::shared_lock lk(mu_);
  return generations_.find(gen) != generations_.end();
}

std::int64_t GenerationStore::refcount(GenId gen) const {
  std::shared_lock lk(mu_);
  return gen_locked(gen).refcount.load(std::memory_order_relaxed);
}

std::optional<GenId> GenerationStore::parent_of(GenId gen) const {
  std::shared_lock lk(mu_);
  return gen_locked(gen).parent;
}

std::optional<std::string> GenerationStore::patch_label_of(GenId gen) const {
  std::shared_lock lk(mu_);
  return gen_locked(gen).patch_label;
}

std::vector<GenId> GenerationStore::live_generation_ids() const {
  std::shared_lock lk(mu_);
  std::vector<GenId> ids;
  ids.reserve(generations_.size());
  for (const auto& [id, g] : generations_) ids.push_back(id);
  return ids;
}

}  // namespace livekv::gen
