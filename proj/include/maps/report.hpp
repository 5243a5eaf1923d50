#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "maps/sweep.hpp"

namespace maps {

nlohmann::json cell_to_json(const RelationScore& cell);
RelationScore cell_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SweepResult& result);
// Throws DataError on a malformed document.
SweepResult sweep_from_json(const nlohmann::json& j);
SweepResult read_sweep(const std::filesystem::path& path);

nlohmann::json to_json(const CountTable& table);
nlohmann::json to_json(const SummaryStats& stats);
nlohmann::json to_json(const ScoreDistribution& dist);
nlohmann::json to_json(const CategoryGrid& grid);

// Counts per direction, summary, category grid and one distribution per
// (relation, direction) present in the result.
nlohmann::json stats_document(const SweepResult& result, double tau);

// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

std::string cells_csv(const SweepResult& result);
std::string counts_csv(const SweepResult& result, double tau);
// Layer x head heatmap, one <rect class="cell"> per head, colored by category set.
std::string category_svg(const CategoryGrid& grid);

enum class ReportFormat { json, csv, counts_csv, svg, stats };
ReportFormat parse_report_format(const std::string& s);

// Byte-stable writers; IoError names the path on failure.
void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
void export_report(const SweepResult& result, double tau, ReportFormat format,
                   const std::filesystem::path& path);

}  // namespace maps
