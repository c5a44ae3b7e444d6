// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cptlab/errors.hpp"
#include "cptlab/harness.hpp"

namespace cptlab {

namespace {

constexpr std::array<const char*, 6> kCompared = {"val_ppl",     "mcp_accuracy",  "copain_overall",
                                                  "ppl_correct", "ppl_incorrect", "shift_mean"};

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    return out;
}

void close_out(std::ofstream& out, const std::filesystem::path& path) {
    if (!out.flush()) {
        throw IoError("write failed for " + path.string());
    }
}

std::string csv_safe(std::string s) {
    std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r' || c == '"'; }, '_');
    return s;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

struct Run {
    std::string label;
    std::string variant;
    std::vector<MetricRecord> records;
};

std::vector<Run> load_runs(const std::vector<std::filesystem::path>& paths) {
    std::vector<Run> runs;
    std::set<std::string> seen;
    for (const auto& p : paths) {
        auto mf = read_metrics(p);
        std::string label = csv_safe(mf.meta.value("name", p.stem().string()));
        const std::string stem = label;
        for (int k = 2; seen.contains(label); ++k) {
            label = stem + "#" + std::to_string(k);
        }
        seen.insert(label);
        runs.push_back({label, mf.meta.value("variant", std::string("?")), std::move(mf.records)});
    }
    return runs;
}

} // namespace

std::string format_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return {buf.data(), res.ptr};
}

void write_csv(const CsvTable& table, const std::filesystem::path& path) {
    auto out = open_out(path);
    auto row = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            out << (i ? "," : "") << cells[i];
        }
        out << '\n';
    };
    row(table.header);
    for (const auto& r : table.rows) {
        if (r.size() != table.header.size()) {
            throw ValidationError("csv row width does not match the header");
        }
        row(r);
    }
    close_out(out, path);
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (!line.empty() && line.back() == ',') {
            cells.emplace_back();
        }
        return cells;
    };
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(path.string() + ": empty csv");
    }
    t.header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        t.rows.push_back(split(line));
        if (t.rows.back().size() != t.header.size()) {
            throw FormatError(path.string() + ": ragged csv row");
        }
    }
    return t;
}

void compare_runs(const std::vector<std::filesystem::path>& metrics, const std::filesystem::path& out_csv) {
    if (metrics.size() < 2) {
        throw ConfigError("compare-runs needs at least two metrics files");
    }
    const auto runs = load_runs(metrics);
    std::set<std::int64_t> all_steps;
    for (const auto& r : runs) {
        for (const auto& rec : r.records) {
            all_steps.insert(rec.step);
        }
    }
    if (all_steps.empty()) {
        throw ValidationError("metrics files hold no records");
    }
    std::string missing;
    for (const auto& r : runs) {
        std::set<std::int64_t> have;
        for (const auto& rec : r.records) {
            have.insert(rec.step);
        }
        std::string list;
        for (auto s : all_steps) {
            if (!have.contains(s)) {
                list += (list.empty() ? "" : " ") + std::to_string(s);
            }
        }
        if (!list.empty()) {
            missing += (missing.empty() ? "" : "; ") + r.label + " lacks steps " + list;
        }
    }
    if (!missing.empty()) {
        throw AlignmentError("step misalignment: " + missing);
    }

    CsvTable table;
    table.header.push_back("step");
    for (const char* m : kCompared) {
        for (const auto& r : runs) {
            table.header.push_back(std::string(m) + "[" + r.label + "]");
        }
        for (std::size_t i = 0; i < runs.size(); ++i) {
            for (std::size_t j = i + 1; j < runs.size(); ++j) {
                table.header.push_back(std::string(m) + "[" + runs[j].label + "-" + runs[i].label + "]");
            }
        }
    }
    auto value_at = [](const Run& r, std::int64_t step, const char* field) {
        const auto it = std::find_if(r.records.begin(), r.records.end(),
                                     [&](const MetricRecord& rec) { return rec.step == step; });
        return record_field(*it, field);
    };
    for (auto step : all_steps) {
        std::vector<std::string> row{std::to_string(step)};
        for (const char* m : kCompared) {
            for (const auto& r : runs) {
                row.push_back(format_number(value_at(r, step, m)));
            }
            for (std::size_t i = 0; i < runs.size(); ++i) {
                for (std::size_t j = i + 1; j < runs.size(); ++j) {
                    row.push_back(format_number(value_at(runs[j], step, m) - value_at(runs[i], step, m)));
                }
            }
        }
        table.rows.push_back(std::move(row));
    }
    write_csv(table, out_csv);

    CsvTable summary;
    summary.header = {"run", "variant", "step"};
    for (const char* m : kCompared) {
        summary.header.emplace_back(m);
    }
    const auto last = *all_steps.rbegin();
    for (const auto& r : runs) {
        std::vector<std::string> row{r.label, csv_safe(r.variant), std::to_string(last)};
        for (const char* m : kCompared) {
            row.push_back(format_number(value_at(r, last, m)));
        }
        summary.rows.push_back(std::move(row));
    }
    auto summary_path = out_csv;
    summary_path.replace_extension(".summary.csv");
    write_csv(summary, summary_path);
}

void export_series(const std::filesystem::path& metrics, const std::vector<std::string>& fields,
                   const std::filesystem::path& out_csv) {
    const auto mf = read_metrics(metrics);
    CsvTable t;
    t.header.push_back("step");
    const MetricRecord probe;
    for (const auto& f : fields) {
        (void)record_field(probe, f);
        if (f != "step") {
            t.header.push_back(f);
        }
    }
    for (const auto& r : mf.records) {
        std::vector<std::string> row;
        for (const auto& f : t.header) {
            const double v = record_field(r, f);
            if (!std::isfinite(v)) {
                throw ValidationError("non-finite " + f + " at step " + std::to_string(r.step) + " in " +
                                      metrics.string());
            }
            row.push_back(format_number(v));
        }
        t.rows.push_back(std::move(row));
    }
    write_csv(t, out_csv);
}

void write_svg_plot(const std::vector<std::filesystem::path>& metrics, std::string_view field,
                    const std::filesystem::path& out_svg) {
    if (metrics.empty()) {
        throw ConfigError("plot needs at least one metrics file");
    }
    const auto runs = load_runs(metrics);
    constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 160, kTop = 30, kBottom = 40;
    static constexpr std::array<const char*, 8> kColors = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                           "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& r : runs) {
        for (const auto& rec : r.records) {
            const double y = record_field(rec, field);
            if (!std::isfinite(y)) {
                throw ValidationError("non-finite " + std::string(field) + " in run " + r.label);
            }
            x0 = std::min(x0, static_cast<double>(rec.step));
            x1 = std::max(x1, static_cast<double>(rec.step));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) {
        throw ValidationError("no records to plot");
    }
    if (x1 == x0) {
        x1 = x0 + 1;
    }
    if (y1 == y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pw = kW - kLeft - kRight;
    const double ph = kH - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    auto out = open_out(out_svg);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"#333\"/>\n";
    out << "<text x=\"" << kLeft << "\" y=\"20\">" << xml_escape(field) << "</text>\n";
    out << "<text x=\"" << kLeft << "\" y=\"" << kH - 10 << "\">step " << format_number(x0) << "</text>\n";
    out << "<text x=\"" << kLeft + pw << "\" y=\"" << kH - 10 << "\" text-anchor=\"end\">" << format_number(x1)
        << "</text>\n";
    out << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 10 << "\" text-anchor=\"end\">" << format_number(y1)
        << "</text>\n";
    out << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + ph << "\" text-anchor=\"end\">" << format_number(y0)
        << "</text>\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const char* color = kColors[i % kColors.size()];
        out << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << color << "\" points=\"";
        for (const auto& rec : runs[i].records) {
            out << format_number(px(static_cast<double>(rec.step))) << ','
                << format_number(py(record_field(rec, field))) << ' ';
        }
        out << "\"/>\n";
        const double ly = kTop + 14.0 + 16.0 * static_cast<double>(i);
        out << "<line x1=\"" << kW - kRight + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kW - kRight + 30
            << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << kW - kRight + 36 << "\" y=\"" << ly << "\">" << xml_escape(runs[i].label)
            << "</text>\n";
    }
    out << "</svg>\n";
    close_out(out, out_svg);
}

} // namespace cptlab
