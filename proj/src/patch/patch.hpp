#pragma once

// Declarative patches: a category (which quiescence methods may apply it),
// function replacements, and a synthetic payload whose size drives the
// apply cost. Loaded from a line-oriented text format.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gen/generation_store.hpp"

namespace livekv::patch {

enum class Category { ThreadLocal, ThreadGroup, Process };

enum class Method { Global, Local };

const char* category_name(Category c);
std::optional<Category> category_from(std::string_view s);
const char* method_name(Method m);
std::optional<Method> method_from(std::string_view s);

struct PatchSpec {
  std::string patch_id;
  Category category = Category::ThreadLocal;
  std::vector<gen::Replacement> replacements;
  std::uint64_t payload_bytes = 0;  // sum of replacement blob lengths

  bool is_noop() const { return patch_id.find("noop") != std::string::npos; }
};

class PatchError : public std::runtime_error {
 public:
  explicit PatchError(const std::string& what) : std::runtime_error(what) {}
};

/// Outcome of checking a patch against a quiescence method.
struct Validation {
  bool ok = false;
  std::string violation;  // empty when ok
};

/// Pure function of (category, method): local quiescence admits only
/// thread-local patches, global admits everything.
Validation validate(const PatchSpec& spec, Method method);

/// Parses the patch file format:
///   patch <patch_id>
///   category <thread_local|thread_group|process>
///   payload <bytes>
///   replace <function_name> tag <tag_string>
///   end
/// The payload is materialized as deterministic pseudo-random bytes seeded
/// by the patch id, split evenly across the replacements.
PatchSpec load_patch_file(const std::string& path, const gen::FunctionTable& functions);
PatchSpec parse_patch_text(const std::string& text, const gen::FunctionTable& functions);

/// Serializes a spec back to the file format (used to materialize the
/// builtin set on disk for wire-level loading).
std::string format_patch_file(const PatchSpec& spec, const gen::FunctionTable& functions);

/// Deterministic builtin patch set spanning the categories and the payload
/// sizes used by the scaling experiments (4 KiB .. 200 KiB), plus a noop.
std::vector<PatchSpec> builtin_patches(const gen::FunctionTable& functions);

}  // namespace livekv::patch
