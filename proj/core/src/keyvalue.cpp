#include "sdcs/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "sdcs/error.hpp"

namespace sdcs {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

template <typename Number>
Number parse_number(const std::string& text, const std::string& key) {
  Number value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

}  // namespace

KeyValueFile KeyValueFile::parse(std::string_view text, std::string source) {
  KeyValueFile file;
  file.source_ = std::move(source);
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(file.source_ + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(stripped).substr(0, eq));
    std::string value = trim(std::string_view(stripped).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(file.source_ + ":" + std::to_string(line_no) + ": empty key");
    }
    if (!file.values_.emplace(key, value).second) {
      throw ConfigError(file.source_ + ":" + std::to_string(line_no) + ": duplicate key '" +
                        key + "'");
    }
  }
  return file;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

const std::string* KeyValueFile::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  consumed_.insert(key);
  return &it->second;
}

std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) const {
  const std::string* v = find(key);
  return v ? *v : fallback;
}

int KeyValueFile::get_int(const std::string& key, int fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<int>(*v, key) : fallback;
}

std::uint64_t KeyValueFile::get_u64(const std::string& key, std::uint64_t fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<std::uint64_t>(*v, key) : fallback;
}

double KeyValueFile::get_double(const std::string& key, double fallback) const {
  const std::string* v = find(key);
  return v ? parse_number<double>(*v, key) : fallback;
}

bool KeyValueFile::get_bool(const std::string& key, bool fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + *v + "'");
}

std::vector<int> KeyValueFile::get_int_list(const std::string& key,
                                            const std::vector<int>& fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& item : split_list(*v)) out.push_back(parse_number<int>(item, key));
  return out;
}

std::vector<double> KeyValueFile::get_double_list(const std::string& key,
                                                  const std::vector<double>& fallback) const {
  const std::string* v = find(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) out.push_back(parse_number<double>(item, key));
  return out;
}

void KeyValueFile::reject_unconsumed() const {
  std::string unknown;
  for (const auto& [key, value] : values_) {
    if (!consumed_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  }
  if (!unknown.empty()) throw ConfigError(source_ + ": unknown config key(s): " + unknown);
}

KeyValueFile KeyValueFile::section(const std::string& prefix) const {
  KeyValueFile out;
  out.source_ = source_ + "[" + prefix + "]";
  for (const auto& [key, value] : values_) {
    if (key.rfind(prefix, 0) == 0) {
      out.values_.emplace(key.substr(prefix.size()), value);
    }
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

}  // namespace sdcs
