#pragma once
// Flat `dotted.key = value` text configuration, plus a binder that maps keys
// onto typed fields so unknown keys and malformed values are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "octflow/errors.hpp"

namespace octflow {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "config") {
    KeyValues kv;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto end = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      kv.values_[key] = std::string(detail::trim(line.substr(eq + 1)));
      if (end == text.size()) break;
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& at(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + text + "'");
  } else {
    T v{};
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc{} || r.ptr != text.data() + text.size())
      throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
    return v;
  }
}

class Settings {
 public:
  using Ref = std::variant<double*, int*, std::uint64_t*, bool*, std::string*>;

  template <typename T>
  void bind(const std::string& key, T& field) {
    if (index_.count(key)) throw ConfigError("key bound twice: " + key);
    index_[key] = entries_.size();
    entries_.push_back({key, Ref(&field)});
  }

  bool knows(const std::string& key) const { return index_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    const auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("unknown key '" + key + "'");
    std::visit([&](auto* p) { *p = parse_value<std::remove_pointer_t<decltype(p)>>(key, value); },
               entries_[it->second].ref);
  }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv.entries()) set(k, v);
  }

  KeyValues dump() const {
    KeyValues kv;
    for (const auto& e : entries_) {
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) kv.set(e.key, *p);
            else if constexpr (std::is_same_v<T, bool>) kv.set(e.key, *p ? "true" : "false");
            else if constexpr (std::is_same_v<T, double>) kv.set(e.key, format_double(*p));
            else kv.set(e.key, std::to_string(*p));
          },
          e.ref);
    }
    return kv;
  }

 private:
  struct Entry {
    std::string key;
    Ref ref;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace octflow
