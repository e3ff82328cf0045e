#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowbench::util {

// Column-named CSV table, enough for run logs and summaries. Cells are kept
// as strings; numeric access parses on demand.
struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int col(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw std::runtime_error("csv: no column '" + name + "'");
    }

    const std::string& cell(std::size_t row, const std::string& name) const {
        return rows.at(row)[static_cast<std::size_t>(col(name))];
    }

    double num(std::size_t row, const std::string& name) const {
        const std::string& c = cell(row, name);
        try {
            return std::stod(c);
        } catch (const std::exception&) {
            throw std::runtime_error("csv: non-numeric cell '" + c + "' in column " + name);
        }
    }

    std::vector<double> column(const std::string& name) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) out.push_back(num(r, name));
        return out;
    }

    static Csv read_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("csv: cannot open " + path);
        Csv csv;
        std::string line;
        if (!std::getline(f, line)) throw std::runtime_error("csv: empty file " + path);
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) csv.header.push_back(cell);
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::vector<std::string> row;
            while (std::getline(ls, cell, ',')) row.push_back(cell);
            if (row.size() != csv.header.size())
                throw std::runtime_error("csv: ragged row in " + path);
            csv.rows.push_back(std::move(row));
        }
        return csv;
    }
};

}  // namespace flowbench::util
