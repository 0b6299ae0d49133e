#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rangegen {

/// Flat key = value configuration. '#' starts a comment, keys are dotted
/// lowercase, unknown keys are rejected, and every key has a documented
/// default (see dump_documentation).
class RunConfig {
  public:
    RunConfig();  // all defaults

    static RunConfig from_file(const std::filesystem::path& path);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    long long get_i64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;

    void set(const std::string& key, const std::string& value);

    /// key = value lines for every key, current values (diff-able echo).
    std::string dump() const;
    static std::string dump_documentation();

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace rangegen
