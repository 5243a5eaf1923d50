#include "maps/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "maps/errors.hpp"

namespace maps {

namespace fs = std::filesystem;
using nlohmann::json;

json cell_to_json(const RelationScore& c) {
    return {{"head", c.head.label()},
            {"relation", c.relation},
            {"direction", to_string(c.suppressive ? Direction::suppress : Direction::promote)},
            {"score", c.score},
            {"k", c.k},
            {"classified", c.classified}};
}

RelationScore cell_from_json(const json& j) {
    RelationScore c;
    c.head = HeadRef::parse(j.at("head").get<std::string>());
    c.relation = j.at("relation").get<std::string>();
    c.suppressive = parse_direction(j.at("direction").get<std::string>()) == Direction::suppress;
    c.score = j.at("score").get<double>();
    c.k = j.at("k").get<std::size_t>();
    c.classified = j.at("classified").get<bool>();
    return c;
}

json to_json(const SweepResult& r) {
    json heads = json::array();
    for (const auto& h : r.heads) heads.push_back(h.label());
    json dirs = json::array();
    for (auto d : r.directions) dirs.push_back(to_string(d));
    json rels = json::array();
    for (const auto& i : r.relations) {
        rels.push_back({{"name", i.name},
                        {"category", to_string(i.category)},
                        {"suppressive", i.suppressive},
                        {"k", i.k},
                        {"n_pairs", i.n_pairs},
                        {"n_dropped", i.n_dropped}});
    }
    json cells = json::array();
    for (const auto& c : r.cells) cells.push_back(cell_to_json(c));
    return {{"model", r.model},
            {"adapter", r.adapter},
            {"config_hash", r.config_hash},
            {"started_at", r.started_at},
            {"finished_at", r.finished_at},
            {"tau", r.tau},
            {"n_layers", r.n_layers},
            {"n_heads", r.n_heads},
            {"heads", heads},
            {"directions", dirs},
            {"relations", rels},
            {"cells", cells},
            {"warnings", r.warnings}};
}

SweepResult sweep_from_json(const json& j) {
    SweepResult r;
    try {
        r.model = j.at("model").get<std::string>();
        r.adapter = j.at("adapter").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.started_at = j.at("started_at").get<std::string>();
        r.finished_at = j.at("finished_at").get<std::string>();
        r.tau = j.at("tau").get<double>();
        r.n_layers = j.at("n_layers").get<std::size_t>();
        r.n_heads = j.at("n_heads").get<std::size_t>();
        for (const auto& h : j.at("heads")) r.heads.push_back(HeadRef::parse(h.get<std::string>()));
        for (const auto& d : j.at("directions")) r.directions.push_back(parse_direction(d.get<std::string>()));
        for (const auto& i : j.at("relations")) {
            r.relations.push_back({i.at("name").get<std::string>(), parse_category(i.at("category").get<std::string>()),
                                   i.at("suppressive").get<bool>(), i.at("k").get<std::size_t>(),
                                   i.at("n_pairs").get<std::size_t>(), i.at("n_dropped").get<std::size_t>()});
        }
        for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
        r.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw DataError(std::string("sweep report: ") + e.what());
    } catch (const UsageError& e) {
        throw DataError(std::string("sweep report: ") + e.what());
    }
    for (const auto& c : r.cells) {
        if (c.head.layer >= r.n_layers || c.head.head >= r.n_heads) {
            throw DataError("sweep report: cell head " + c.head.label() + " outside the model");
        }
        if (!r.relation(c.relation)) throw DataError("sweep report: unknown relation '" + c.relation + "'");
    }
    return r;
}

SweepResult read_sweep(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open sweep report");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return sweep_from_json(j);
}

json to_json(const CountTable& table) {
    json j = json::array();
    for (const auto& [name, n] : table) j.push_back({{"relation", name}, {"heads", n}});
    return j;
}

json to_json(const SummaryStats& s) {
    return {{"classified_heads", s.classified_heads},
            {"multi_category_fraction", s.multi_category_fraction ? json(*s.multi_category_fraction) : json(nullptr)},
            {"suppression_fraction", s.suppression_fraction ? json(*s.suppression_fraction) : json(nullptr)},
            {"per_layer_classified_counts", s.per_layer_classified_counts}};
}

json to_json(const ScoreDistribution& d) {
    return {{"relation", d.relation},
            {"direction", to_string(d.direction)},
            {"bin_width", ScoreDistribution::kBinWidth},
            {"counts", d.counts},
            {"max", d.max},
            {"n", d.n}};
}

json to_json(const CategoryGrid& g) {
    json rows = json::array();
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        json row = json::array();
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            json cats = json::array();
            for (auto c : g.at(l, h)) cats.push_back(to_string(c));
            row.push_back(cats);
        }
        rows.push_back(row);
    }
    return {{"n_layers", g.n_layers}, {"n_heads", g.n_heads}, {"categories", rows}};
}

json stats_document(const SweepResult& r, double tau) {
    json dists = json::array();
    for (const auto& rel : r.relations) {
        for (Direction d : {Direction::promote, Direction::suppress}) {
            const auto dist = score_distribution(r, rel.name, d);
            if (dist.n > 0) dists.push_back(to_json(dist));
        }
    }
    return {{"tau", tau},
            {"config_hash", r.config_hash},
            {"counts_promote", to_json(count_by_relation(r, tau, Direction::promote))},
            {"counts_suppress", to_json(count_by_relation(r, tau, Direction::suppress))},
            {"summary", to_json(summary_stats(r, tau))},
            {"category_grid", to_json(category_grid(r, tau))},
            {"distributions", dists}};
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

const char* category_color(RelationCategory c) {
    switch (c) {
        case RelationCategory::algorithmic: return "#4c72b0";
        case RelationCategory::knowledge: return "#dd8452";
        case RelationCategory::linguistic: return "#55a868";
        case RelationCategory::translation: return "#c44e52";
        case RelationCategory::custom: return "#8172b3";
    }
    return "#8172b3";
}

constexpr const char* kMultiColor = "#222222";
constexpr const char* kEmptyColor = "#f2f2f2";

}  // namespace

std::string cells_csv(const SweepResult& r) {
    std::string out = "layer,head,relation,direction,k,score,classified\n";
    for (const auto& c : r.cells) {
        out += std::to_string(c.head.layer) + ',' + std::to_string(c.head.head) + ',' + csv_field(c.relation) + ',' +
               to_string(c.suppressive ? Direction::suppress : Direction::promote) + ',' + std::to_string(c.k) +
               ',' + format_double(c.score) + ',' + (c.classified ? "1" : "0") + '\n';
    }
    return out;
}

std::string counts_csv(const SweepResult& r, double tau) {
    const auto promote = count_by_relation(r, tau, Direction::promote);
    const auto suppress = count_by_relation(r, tau, Direction::suppress);
    std::string out = "relation,category,promote_heads,suppress_heads\n";
    for (std::size_t i = 0; i < r.relations.size(); ++i) {
        out += csv_field(r.relations[i].name) + ',' + to_string(r.relations[i].category) + ',' +
               std::to_string(promote[i].second) + ',' + std::to_string(suppress[i].second) + '\n';
    }
    return out;
}

std::string category_svg(const CategoryGrid& g) {
    constexpr int cell = 14, margin = 40, legend = 130;
    const int width = margin + static_cast<int>(g.n_heads) * cell + legend;
    const int height = std::max(margin + static_cast<int>(g.n_layers) * cell + 10, margin + 7 * 18);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    s << "<text x=\"" << margin << "\" y=\"14\">head</text>\n";
    s << "<text x=\"4\" y=\"" << margin - 4 << "\">layer</text>\n";
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        if (l % 5 == 0) {
            s << "<text x=\"4\" y=\"" << margin + static_cast<int>(l) * cell + cell - 3 << "\">" << l << "</text>\n";
        }
        for (std::size_t h = 0; h < g.n_heads; ++h) {
            const auto& cats = g.at(l, h);
            const char* fill = cats.empty() ? kEmptyColor : cats.size() > 1 ? kMultiColor : category_color(*cats.begin());
            std::string title = std::to_string(l) + "." + std::to_string(h);
            for (auto c : cats) title += " " + to_string(c);
            s << "<rect class=\"cell\" x=\"" << margin + static_cast<int>(h) * cell << "\" y=\""
              << margin + static_cast<int>(l) * cell << "\" width=\"" << cell << "\" height=\"" << cell
              << "\" fill=\"" << fill << "\" stroke=\"#ffffff\"><title>" << xml_escape(title) << "</title></rect>\n";
        }
    }
    const int lx = margin + static_cast<int>(g.n_heads) * cell + 12;
    int ly = margin;
    auto entry = [&](const char* color, const std::string& label) {
        s << "<rect x=\"" << lx << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>";
        s << "<text x=\"" << lx + 14 << "\" y=\"" << ly + 9 << "\">" << label << "</text>\n";
        ly += 18;
    };
    for (auto c : {RelationCategory::algorithmic, RelationCategory::knowledge, RelationCategory::linguistic,
                   RelationCategory::translation, RelationCategory::custom}) {
        entry(category_color(c), to_string(c));
    }
    entry(kMultiColor, "multiple");
    s << "</svg>\n";
    return s.str();
}

ReportFormat parse_report_format(const std::string& s) {
    if (s == "json") return ReportFormat::json;
    if (s == "csv") return ReportFormat::csv;
    if (s == "counts-csv") return ReportFormat::counts_csv;
    if (s == "svg") return ReportFormat::svg;
    if (s == "stats") return ReportFormat::stats;
    throw UsageError("unknown report format '" + s + "' (json, csv, counts-csv, svg, stats)");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string(), "cannot open for writing");
    out << text;
    out.flush();
    if (!out) throw IoError(path.string(), "write failed");
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void export_report(const SweepResult& r, double tau, ReportFormat format, const fs::path& path) {
    switch (format) {
        case ReportFormat::json: write_json(path, to_json(r)); break;
        case ReportFormat::csv: write_text(path, cells_csv(r)); break;
        case ReportFormat::counts_csv: write_text(path, counts_csv(r, tau)); break;
        case ReportFormat::svg: write_text(path, category_svg(category_grid(r, tau))); break;
        case ReportFormat::stats: write_json(path, stats_document(r, tau)); break;
    }
}

}  // namespace maps
