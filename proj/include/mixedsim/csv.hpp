#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixedsim/models.hpp"

namespace mixedsim {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const char* column) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("line " + std::to_string(line_no) + ": bad " + column +
                                 " value '" + s + "'");
    }
}

}  // namespace detail

// Header: state,stimulus,response[,temperature]
inline MeasurementTable ingest_measurements(std::istream& in) {
    MeasurementTable table;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty measurement file");
    auto header = detail::split_csv_line(line);
    bool with_temp = false;
    if (header.size() == 4 && header[3] == "temperature")
        with_temp = true;
    else if (header.size() != 3)
        with_temp = false;
    if (header.size() < 3 || header[0] != "state" || header[1] != "stimulus" ||
        header[2] != "response" || (header.size() == 4 && !with_temp) || header.size() > 4)
        throw std::runtime_error("bad header: expected state,stimulus,response[,temperature]");

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(header.size()) + " columns, got " +
                                     std::to_string(cells.size()));
        MeasurementRow row;
        row.state = detail::parse_double(cells[0], line_no, "state");
        row.stimulus = detail::parse_double(cells[1], line_no, "stimulus");
        row.response = detail::parse_double(cells[2], line_no, "response");
        if (with_temp) row.temperature = detail::parse_double(cells[3], line_no, "temperature");
        table.rows.push_back(row);
    }
    if (table.rows.empty()) throw std::runtime_error("measurement file has no data rows");
    return table;
}

inline MeasurementTable ingest_measurements(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return ingest_measurements(f);
}

inline void export_measurements(std::ostream& out, const MeasurementTable& table) {
    const bool with_temp = !table.rows.empty() && table.rows.front().temperature.has_value();
    out << "state,stimulus,response" << (with_temp ? ",temperature" : "") << "\n";
    out.precision(17);
    for (const auto& r : table.rows) {
        out << r.state << ',' << r.stimulus << ',' << r.response;
        if (with_temp) out << ',' << r.temperature.value();
        out << "\n";
    }
}

}  // namespace mixedsim
