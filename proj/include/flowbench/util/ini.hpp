#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowbench::util {

// Minimal sectioned key-value configuration format:
//   [section]
//   key = value        # trailing comments with '#' or ';'
// Also used to write fully-resolved config copies into run directories.
class Ini {
public:
    void set(const std::string& section, const std::string& key, const std::string& value) {
        auto& sec = sections_[section];
        for (auto& [k, v] : sec)
            if (k == key) {
                v = value;
                return;
            }
        sec.emplace_back(key, value);
    }

    std::optional<std::string> get(const std::string& section, const std::string& key) const {
        auto it = sections_.find(section);
        if (it == sections_.end()) return std::nullopt;
        for (const auto& [k, v] : it->second)
            if (k == key) return v;
        return std::nullopt;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        auto v = get(section, key);
        return v ? std::stod(*v) : fallback;
    }
    long get_int(const std::string& section, const std::string& key, long fallback) const {
        auto v = get(section, key);
        return v ? std::stol(*v) : fallback;
    }
    std::string get_str(const std::string& section, const std::string& key, const std::string& fallback) const {
        auto v = get(section, key);
        return v ? *v : fallback;
    }

    bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

    static Ini parse_string(const std::string& text) {
        Ini ini;
        std::istringstream is(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                auto close = s.find(']');
                if (close == std::string::npos) throw std::runtime_error("config: unterminated section at line " + std::to_string(lineno));
                section = trim(s.substr(1, close - 1));
                ini.sections_[section];
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos) throw std::runtime_error("config: missing '=' at line " + std::to_string(lineno));
            ini.set(section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
        }
        return ini;
    }

    static Ini parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_string(ss.str());
    }

    std::string to_string() const {
        std::string out;
        for (const auto& [name, kv] : sections_) {
            out += "[" + name + "]\n";
            for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
            out += "\n";
        }
        return out;
    }

    void write_file(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("config: cannot write " + path);
        f << to_string();
    }

private:
    static std::string strip_comment(const std::string& s) {
        auto pos = s.find_first_of("#;");
        return pos == std::string::npos ? s : s.substr(0, pos);
    }
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections_;
};

}  // namespace flowbench::util
