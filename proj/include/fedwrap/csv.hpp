#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "fedwrap/dataset.hpp"
#include "fedwrap/error.hpp"

namespace fedwrap {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

enum class ColumnType { Numeric, Categorical, Label };

/// Column name -> type. Every CSV column must be listed, exactly one as the label.
/// `label_order`, when given, fixes the class ids (its i-th value becomes class i);
/// otherwise ids follow first appearance.
struct Schema {
    std::map<std::string, ColumnType> columns;
    std::vector<std::string> label_order;
};

inline ColumnType column_type_from_string(const std::string& s) {
    if (s == "numeric")
        return ColumnType::Numeric;
    if (s == "categorical")
        return ColumnType::Categorical;
    if (s == "label")
        return ColumnType::Label;
    throw IngestionError("schema: unknown column type '" + s + "'");
}

inline Schema schema_from_json(const nlohmann::json& j) {
    const auto& cols = j.contains("columns") ? j.at("columns") : j;
    if (!cols.is_object())
        throw IngestionError("schema must be a JSON object mapping column -> type");
    Schema s;
    for (const auto& [name, type] : cols.items()) {
        if (name == "label_order" && type.is_array())
            continue;
        s.columns[name] = column_type_from_string(type.get<std::string>());
    }
    if (j.contains("label_order"))
        s.label_order = j.at("label_order").get<std::vector<std::string>>();
    return s;
}

inline Schema load_schema(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw IngestionError("cannot read schema file " + path);
    try {
        return schema_from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("schema file " + path + ": " + e.what());
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == delim) {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

/// Parses delimited text with a header row. The delimiter is ';' when the header holds
/// more semicolons than commas (the UCI bank files use ';'), otherwise ','.
inline Table parse_csv(std::string_view text, const std::string& source = "<csv>") {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos)
            end = text.size();
        auto line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r')
            line.remove_suffix(1);
        if (!line.empty())
            lines.push_back(line);
        start = end + 1;
    }
    if (lines.empty())
        throw IngestionError(source + ": empty file");

    const auto semis = std::count(lines[0].begin(), lines[0].end(), ';');
    const auto commas = std::count(lines[0].begin(), lines[0].end(), ',');
    const char delim = semis > commas ? ';' : ',';

    Table t;
    for (auto& h : detail::split_csv_line(lines[0], delim))
        t.header.push_back(detail::trim(h));
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto row = detail::split_csv_line(lines[i], delim);
        if (row.size() != t.header.size())
            throw IngestionError(source + ": row " + std::to_string(i) + " has " +
                                 std::to_string(row.size()) + " cells, header has " +
                                 std::to_string(t.header.size()));
        for (auto& c : row)
            c = detail::trim(std::move(c));
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw IngestionError("cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline std::string to_csv(const Table& t) {
    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i)
                out.push_back(',');
            out += row[i];
        }
        out.push_back('\n');
    };
    emit(t.header);
    for (const auto& r : t.rows)
        emit(r);
    return out;
}

inline double parse_number(const std::string& cell, const std::string& context) {
    double v = 0.0;
    const char* b = cell.data();
    const char* e = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (cell.empty() || ec != std::errc() || ptr != e || !std::isfinite(v))
        throw IngestionError(context + ": cannot parse '" + cell + "' as a number");
    return v;
}

/// Numeric columns standardized with population statistics over the whole table;
/// categorical columns one-hot encoded in first-appearance order; label values mapped
/// to dense ids in first-appearance order.
inline Dataset encode_table(const Table& t, const Schema& schema,
                            const std::string& source = "<csv>") {
    if (t.rows.empty())
        throw IngestionError(source + ": no data rows");
    std::size_t label_col = t.header.size();
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        auto it = schema.columns.find(t.header[c]);
        if (it == schema.columns.end())
            throw IngestionError(source + ": column '" + t.header[c] + "' (column " +
                                 std::to_string(c) + ") is not in the schema");
        if (it->second == ColumnType::Label) {
            if (label_col != t.header.size())
                throw IngestionError(source + ": more than one label column");
            label_col = c;
        }
    }
    for (const auto& [name, type] : schema.columns)
        if (std::find(t.header.begin(), t.header.end(), name) == t.header.end())
            throw IngestionError(source + ": schema column '" + name + "' missing from header");
    if (label_col == t.header.size())
        throw IngestionError(source + ": schema has no label column");

    struct Encoded {
        std::vector<std::vector<double>> cols;
        std::vector<std::string> names;
    };
    Encoded enc;
    const std::size_t n = t.rows.size();

    for (std::size_t c = 0; c < t.header.size(); ++c) {
        const auto type = schema.columns.at(t.header[c]);
        if (type == ColumnType::Numeric) {
            std::vector<double> col(n);
            for (std::size_t r = 0; r < n; ++r)
                col[r] = parse_number(t.rows[r][c], source + " row " + std::to_string(r + 1) +
                                                        " column '" + t.header[c] + "'");
            double mean = 0.0;
            for (double v : col)
                mean += v;
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (double v : col)
                var += (v - mean) * (v - mean);
            const double sd = std::sqrt(var / static_cast<double>(n));
            for (double& v : col)
                v = sd > 0.0 ? (v - mean) / sd : 0.0;
            enc.cols.push_back(std::move(col));
            enc.names.push_back(t.header[c]);
        } else if (type == ColumnType::Categorical) {
            std::vector<std::string> order;
            std::unordered_map<std::string, std::size_t> index;
            for (const auto& row : t.rows)
                if (index.emplace(row[c], order.size()).second)
                    order.push_back(row[c]);
            for (std::size_t k = 0; k < order.size(); ++k) {
                std::vector<double> col(n, 0.0);
                for (std::size_t r = 0; r < n; ++r)
                    if (index.at(t.rows[r][c]) == k)
                        col[r] = 1.0;
                enc.cols.push_back(std::move(col));
                enc.names.push_back(t.header[c] + "=" + order[k]);
            }
        }
    }
    if (enc.cols.empty())
        throw IngestionError(source + ": no feature columns");

    Dataset d;
    d.in_dim = enc.cols.size();
    d.feature_names = enc.names;
    std::unordered_map<std::string, int> label_ids;
    for (const auto& v : schema.label_order)
        label_ids.emplace(v, static_cast<int>(label_ids.size()));
    d.features.reserve(n * d.in_dim);
    for (std::size_t r = 0; r < n; ++r) {
        for (const auto& col : enc.cols)
            d.features.push_back(col[r]);
        const auto& raw = t.rows[r][label_col];
        auto it = label_ids.find(raw);
        if (it == label_ids.end()) {
            if (!schema.label_order.empty())
                throw IngestionError(source + " row " + std::to_string(r + 1) + ": label '" +
                                     raw + "' is not in label_order");
            it = label_ids.emplace(raw, static_cast<int>(label_ids.size())).first;
        }
        d.labels.push_back(it->second);
        d.row_ids.push_back(r);
    }
    d.n_classes = label_ids.size();
    if (d.n_classes < 2)
        throw IngestionError(source + ": label column has fewer than 2 distinct values");
    return d;
}

inline Dataset load_csv(const std::string& path, const Schema& schema) {
    const auto text = read_file(path);
    return encode_table(parse_csv(text, path), schema, path);
}

inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

/// Already-encoded dataset as `row_id,<feature names...>,label`.
inline std::string dataset_to_csv(const Dataset& d) {
    std::string out = "row_id";
    for (const auto& name : d.feature_names) {
        out.push_back(',');
        out += name;
    }
    out += ",label\n";
    for (std::size_t i = 0; i < d.n_rows(); ++i) {
        out += std::to_string(d.row_ids[i]);
        for (double v : d.row(i)) {
            out.push_back(',');
            out += format_double(v);
        }
        out.push_back(',');
        out += std::to_string(d.labels[i]);
        out.push_back('\n');
    }
    return out;
}

/// Reads the `dataset_to_csv` layout. `n_classes` of 0 means max(label) + 1, at least 2.
inline Dataset dataset_from_csv(std::string_view text, std::size_t n_classes = 0,
                                const std::string& source = "<csv>") {
    const auto t = parse_csv(text, source);
    if (t.header.size() < 3 || t.header.front() != "row_id" || t.header.back() != "label")
        throw IngestionError(source + ": expected header row_id,<features...>,label");
    Dataset d;
    d.in_dim = t.header.size() - 2;
    d.feature_names.assign(t.header.begin() + 1, t.header.end() - 1);
    int max_label = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto ctx = source + " row " + std::to_string(r + 1);
        const auto& row = t.rows[r];
        d.row_ids.push_back(static_cast<std::size_t>(parse_number(row.front(), ctx)));
        for (std::size_t c = 1; c + 1 < row.size(); ++c)
            d.features.push_back(parse_number(row[c], ctx + " column '" + t.header[c] + "'"));
        const int y = static_cast<int>(parse_number(row.back(), ctx + " label"));
        if (y < 0)
            throw IngestionError(ctx + ": negative label");
        max_label = std::max(max_label, y);
        d.labels.push_back(y);
    }
    d.n_classes = n_classes ? n_classes : std::max<std::size_t>(2, max_label + 1);
    d.validate();
    return d;
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot write " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

} // namespace fedwrap
