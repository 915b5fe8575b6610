#pragma once

// Line-oriented "key = value" configuration text. '#' starts a comment;
// later assignments override earlier ones.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rave {

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "config");
  static KeyValues read(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string* find(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  /// Later values win.
  void merge(const KeyValues& other);

  const std::map<std::string, std::string>& entries() const { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

double parse_double(const std::string& key, const std::string& value);
long parse_long(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<double> parse_double_list(const std::string& key, const std::string& value);
std::vector<long> parse_long_list(const std::string& key, const std::string& value);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace rave
