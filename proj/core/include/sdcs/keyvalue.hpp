#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace sdcs {

// UTF-8 "key = value" text with '#' comments. Keys are unique; every key
// read through a getter is marked consumed so that leftovers can be rejected.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::string_view text, std::string source = "<string>");
  static KeyValueFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  // Keys present in the file that were never read. Throws ConfigError listing
  // them when non-empty.
  void reject_unconsumed() const;
  // Restricts to keys starting with `prefix` (the prefix is stripped).
  KeyValueFile section(const std::string& prefix) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  const std::string* find(const std::string& key) const;

  std::string source_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

// Stable 64-bit FNV-1a, used for provenance config hashes.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace sdcs
