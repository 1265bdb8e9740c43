#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace mvaf {

// Shortest decimal text that parses back to the same double.
std::string format_real(double value);

// Flat `key=value` text, one entry per line; `#` starts a comment. Keys may
// use dots for grouping (train.batch_size). Serialization is sorted by key.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& source = "<config>");
  static FlatConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value) { set(key, format_real(value)); }
  void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }

  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_real(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Applies every entry of `other` on top of this one.
  void merge(const FlatConfig& other);

  std::string serialize() const;
  void save(const std::string& path) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mvaf
