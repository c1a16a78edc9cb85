#include "patch/patch.hpp"

#include <fstream>
#include <random>
#include <sstream>

namespace livekv::patch {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::vector<unsigned char> synthetic_blob(std::string_view patch_id, std::size_t index,
                                          std::size_t length) {
  std::mt19937_64 rng(fnv1a(patch_id) + 0x9e3779b97f4a7c15ull * (index + 1));
  std::vector<unsigned char> blob(length);
  for (auto& b : blob) b = static_cast<unsigned char>(rng() & 0xff);
  return blob;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

void materialize_blobs(PatchSpec& spec) {
  if (spec.replacements.empty()) return;
  const std::size_t n = spec.replacements.size();
  const std::uint64_t per = spec.payload_bytes / n;
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t len = (i + 1 == n) ? spec.payload_bytes - assigned : per;
    spec.replacements[i].blob = synthetic_blob(spec.patch_id, i, len);
    assigned += len;
  }
}

}  // namespace

const char* category_name(Category c) {
  switch (c) {
    case Category::ThreadLocal: return "thread_local";
    case Category::ThreadGroup: return "thread_group";
    case Category::Process: return "process";
  }
  return "?";
}

std::optional<Category> category_from(std::string_view s) {
  if (s == "thread_local") return Category::ThreadLocal;
  if (s == "thread_group") return Category::ThreadGroup;
  if (s == "process") return Category::Process;
  return std::nullopt;
}

const char* method_name(Method m) {
  return m == Method::Global ? "global" : "local";
}

std::optional<Method> method_from(std::string_view s) {
  std::string lower(s);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "global") return Method::Global;
  if (lower == "local") return Method::Local;
  return std::nullopt;
}

Validation validate(const PatchSpec& spec, Method method) {
  if (method == Method::Global) return {true, {}};
  if (spec.category == Category::ThreadLocal) return {true, {}};
  Validation v;
  v.ok = false;
  v.violation = std::string(category_name(spec.category)) + " patch requires global quiescence";
  return v;
}

PatchSpec parse_patch_text(const std::string& text, const gen::FunctionTable& functions) {
  PatchSpec spec;
  bool have_patch = false, have_category = false, have_payload = false, have_end = false;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      throw PatchError("line " + std::to_string(lineno) + ": CR line ending not allowed");
    }
    for (unsigned char c : line) {
      if (c > 0x7f) throw PatchError("line " + std::to_string(lineno) + ": non-ASCII byte");
    }
    auto toks = split_ws(line);
    if (toks.empty()) {
      if (have_end) continue;
      throw PatchError("line " + std::to_string(lineno) + ": empty line before end");
    }
    if (have_end) {
      throw PatchError("line " + std::to_string(lineno) + ": content after end");
    }
    const std::string& directive = toks[0];
    if (directive == "patch") {
      if (have_patch || toks.size() != 2) {
        throw PatchError("line " + std::to_string(lineno) + ": bad patch directive");
      }
      spec.patch_id = toks[1];
      have_patch = true;
    } else if (directive == "category") {
      if (!have_patch || have_category || toks.size() != 2) {
        throw PatchError("line " + std::to_string(lineno) + ": bad category directive");
      }
      auto cat = category_from(toks[1]);
      if (!cat) throw PatchError("line " + std::to_string(lineno) + ": invalid category " + toks[1]);
      spec.category = *cat;
      have_category = true;
    } else if (directive == "payload") {
      if (!have_patch || have_payload || toks.size() != 2) {
        throw PatchError("line " + std::to_string(lineno) + ": bad payload directive");
      }
      try {
        spec.payload_bytes = std::stoull(toks[1]);
      } catch (const std::exception&) {
        throw PatchError("line " + std::to_string(lineno) + ": payload is not an integer");
      }
      have_payload = true;
    } else if (directive == "replace") {
      if (!have_patch || toks.size() != 4 || toks[2] != "tag") {
        throw PatchError("line " + std::to_string(lineno) + ": bad replace directive");
      }
      auto fid = functions.id_of(toks[1]);
      if (!fid) throw PatchError("line " + std::to_string(lineno) + ": unknown function " + toks[1]);
      gen::Replacement rep;
      rep.function = *fid;
      rep.tag = toks[3];
      spec.replacements.push_back(std::move(rep));
    } else if (directive == "end") {
      if (toks.size() != 1) throw PatchError("line " + std::to_string(lineno) + ": bad end directive");
      have_end = true;
    } else {
      throw PatchError("line " + std::to_string(lineno) + ": unknown directive " + directive);
    }
  }
  if (!have_patch || !have_category || !have_payload || !have_end) {
    throw PatchError("incomplete patch file (need patch/category/payload/end)");
  }
  if (spec.replacements.empty()) {
    if (!spec.is_noop()) throw PatchError("patch has no replacements and is not marked noop");
    if (spec.payload_bytes != 0) throw PatchError("noop patch must declare payload 0");
  }
  materialize_blobs(spec);
  return spec;
}

PatchSpec load_patch_file(const std::string& path, const gen::FunctionTable& functions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PatchError("cannot open patch file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_patch_text(buf.str(), functions);
}

std::string format_patch_file(const PatchSpec& spec, const gen::FunctionTable& functions) {
  std::ostringstream out;
  out << "patch " << spec.patch_id << "\n";
  out << "category " << category_name(spec.category) << "\n";
  out << "payload " << spec.payload_bytes << "\n";
  for (const auto& rep : spec.replacements) {
    out << "replace " << functions.name_of(rep.function) << " tag " << rep.tag << "\n";
  }
  out << "end\n";
  return out.str();
}

std::vector<PatchSpec> builtin_patches(const gen::FunctionTable& functions) {
  auto render = functions.id_of("render_version");
  auto transform = functions.id_of("transform_value");
  if (!render || !transform) {
    throw PatchError("builtin patches need render_version and transform_value");
  }

  auto make = [&](std::string id, Category cat, std::uint64_t payload,
                  std::vector<std::pair<gen::FunctionId, std::string>> reps) {
    PatchSpec spec;
    spec.patch_id = std::move(id);
    spec.category = cat;
    spec.payload_bytes = payload;
    for (auto& [f, tag] : reps) {
      gen::Replacement rep;
      rep.function = f;
      rep.tag = std::move(tag);
      spec.replacements.push_back(std::move(rep));
    }
    materialize_blobs(spec);
    return spec;
  };

  std::vector<PatchSpec> out;
  out.push_back(make("builtin-v1-4k", Category::ThreadLocal, 4 * 1024, {{*render, "v1"}}));
  out.push_back(make("builtin-v2-16k", Category::ThreadLocal, 16 * 1024, {{*render, "v2"}}));
  out.push_back(make("builtin-v3-64k", Category::ThreadLocal, 64 * 1024, {{*render, "v3"}}));
  out.push_back(make("builtin-v4-200k", Category::ThreadLocal, 200 * 1024, {{*render, "v4"}}));
  out.push_back(
      make("builtin-v5-upper-8k", Category::ThreadLocal, 8 * 1024, {{*transform, "v5-upper"}}));
  out.push_back(make("builtin-tg-32k", Category::ThreadGroup, 32 * 1024, {{*render, "tg1"}}));
  out.push_back(make("builtin-proc-12k", Category::Process, 12 * 1024,
                     {{*render, "p1"}, {*transform, "p1-upper"}}));
  out.push_back(make("noop", Category::ThreadLocal, 0, {}));
  return out;
}

}  // namespace livekv::patch
