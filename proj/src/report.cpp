// Result CSV (de)serialization and the report layer: Markdown tables and
// self-contained SVG plots, all derived purely from the raw CSVs so that
// regenerating a report never adds information.
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cdm/errors.hpp"
#include "cdm/harness.hpp"
#include "text_io.hpp"

namespace fs = std::filesystem;

namespace cdm {

const std::vector<std::string> kMetricNames{"rmse_q025", "rmse_median", "rmse_q975",
                                            "w1"};

namespace {

constexpr const char* kResultHeader = "gamma,seed,config_hash,metric,value";
constexpr const char* kAblationHeader = "variant,gamma,seed,config_hash,metric,value";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

bool metric_known(const std::string& m) {
    return std::find(kMetricNames.begin(), kMetricNames.end(), m) != kMetricNames.end();
}

void validate_row(const ResultRow& r, const fs::path& path, std::size_t line_no) {
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (!metric_known(r.metric))
        throw FormatError(where + ": unknown metric '" + r.metric + "'");
    if (!std::isfinite(r.value) || r.value < 0.0)
        throw FormatError(where + ": metric value must be finite and >= 0");
    if (r.config_hash.size() != 16 ||
        r.config_hash.find_first_not_of("0123456789abcdef") != std::string::npos)
        throw FormatError(where + ": config_hash must be 16 lowercase hex digits");
}

std::string format_row(const ResultRow& r) {
    return detail::strf("%.17g,", r.gamma) + std::to_string(r.seed) + "," +
           r.config_hash + "," + r.metric + detail::strf(",%.17g", r.value);
}

ResultRow parse_row(const std::vector<std::string>& f, const fs::path& path,
                    std::size_t line_no) {
    ResultRow r;
    r.gamma = std::strtod(f[0].c_str(), nullptr);
    r.seed = std::strtoull(f[1].c_str(), nullptr, 10);
    r.config_hash = f[2];
    r.metric = f[3];
    r.value = std::strtod(f[4].c_str(), nullptr);
    validate_row(r, path, line_no);
    return r;
}

std::string fmt3(double v) { return detail::strf("%.3f", v); }

std::vector<double> sorted_unique_gammas(const std::vector<ResultRow>& rows) {
    std::set<double> s;
    for (const ResultRow& r : rows) s.insert(r.gamma);
    return std::vector<double>(s.begin(), s.end());
}

std::vector<std::uint64_t> sorted_unique_seeds(const std::vector<ResultRow>& rows) {
    std::set<std::uint64_t> s;
    for (const ResultRow& r : rows) s.insert(r.seed);
    return std::vector<std::uint64_t>(s.begin(), s.end());
}

std::string gamma_label(double g) { return detail::strf("%g", g); }

// Mean of a metric over seeds at one gamma; empty optional when absent.
struct CellStat {
    double mean = 0.0;
    double stdev = 0.0; // sample standard deviation (n - 1)
    int n = 0;
};

CellStat cell_stat(const std::vector<ResultRow>& rows, double gamma,
                   const std::string& metric) {
    std::vector<double> vals;
    for (const ResultRow& r : rows)
        if (r.gamma == gamma && r.metric == metric) vals.push_back(r.value);
    CellStat s;
    s.n = static_cast<int>(vals.size());
    if (vals.empty()) return s;
    double sum = 0.0;
    for (double v : vals) sum += v;
    s.mean = sum / s.n;
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - s.mean) * (v - s.mean);
        s.stdev = std::sqrt(ss / (s.n - 1));
    }
    return s;
}

} // namespace

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void write_result_csv(const fs::path& path, const std::vector<ResultRow>& rows) {
    std::string text = std::string(kResultHeader) + "\n";
    for (const ResultRow& r : rows) {
        validate_row(r, path, 0);
        text += format_row(r) + "\n";
    }
    detail::atomic_write_text(path, text);
}

std::vector<ResultRow> read_result_csv(const fs::path& path) {
    std::istringstream is(detail::read_text_file(path));
    std::string line;
    if (!std::getline(is, line) || line != kResultHeader)
        throw FormatError(path.string() + ": bad results header");
    std::vector<ResultRow> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 5)
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": expected 5 fields");
        rows.push_back(parse_row(f, path, line_no));
    }
    return rows;
}

void write_ablation_csv(const fs::path& path,
                        const std::vector<std::pair<std::string, ResultRow>>& rows) {
    std::string text = std::string(kAblationHeader) + "\n";
    for (const auto& [variant, r] : rows) {
        validate_row(r, path, 0);
        text += variant + "," + format_row(r) + "\n";
    }
    detail::atomic_write_text(path, text);
}

std::vector<std::pair<std::string, ResultRow>> read_ablation_csv(const fs::path& path) {
    std::istringstream is(detail::read_text_file(path));
    std::string line;
    if (!std::getline(is, line) || line != kAblationHeader)
        throw FormatError(path.string() + ": bad ablation header");
    std::vector<std::pair<std::string, ResultRow>> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 6)
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": expected 6 fields");
        rows.emplace_back(f[0], parse_row({f.begin() + 1, f.end()}, path, line_no));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Markdown
// ---------------------------------------------------------------------------

std::string markdown_sweep_report(const std::vector<ResultRow>& rows,
                                  const std::vector<PointOutcome>& failures) {
    const std::vector<double> gammas = sorted_unique_gammas(rows);
    const std::vector<std::uint64_t> seeds = sorted_unique_seeds(rows);
    std::string md = "# Confounding sweep\n\n";
    md += "Metric values are percentages of V_max. Entries average over " +
          std::to_string(seeds.size()) + " seed(s).\n\n";
    if (!rows.empty()) {
        md += "| Metric |";
        for (double g : gammas) md += " gamma=" + gamma_label(g) + " |";
        md += "\n|---|";
        for (std::size_t i = 0; i < gammas.size(); ++i) md += "---|";
        md += "\n";
        for (const std::string& metric : kMetricNames) {
            md += "| " + metric + " |";
            for (double g : gammas) {
                const CellStat s = cell_stat(rows, g, metric);
                md += s.n > 0 ? " " + fmt3(s.mean) + " |" : " - |";
            }
            md += "\n";
        }
        md += "\nPlots: ";
        for (std::size_t i = 0; i < kMetricNames.size(); ++i)
            md += (i ? ", " : "") + ("plot_" + kMetricNames[i] + ".svg");
        md += "\n";
    } else {
        md += "No results.\n";
    }
    if (!failures.empty()) {
        md += "\n## Failures\n\n";
        for (const PointOutcome& p : failures) {
            md += "- ";
            if (!p.variant.empty()) md += "variant=" + p.variant + " ";
            md += "gamma=" + gamma_label(p.gamma) + " seed=" + std::to_string(p.seed) +
                  ": " + p.error + "\n";
        }
    }
    return md;
}

std::string markdown_ablation_report(
    const std::vector<std::pair<std::string, ResultRow>>& rows) {
    // Display names in study order.
    const std::vector<std::pair<std::string, std::string>> variants{
        {"full", "Full CDM (baseline)"},
        {"steps_20", "Diffusion steps = 20"},
        {"linear_schedule", "Linear beta schedule"},
        {"residual_3", "Extra residual layer"},
        {"embed_8", "Embedding dimension = 8"},
        {"mlp_backbone", "Simple-NN backbone"}};
    std::vector<ResultRow> flat;
    for (const auto& [v, r] : rows) flat.push_back(r);
    const std::vector<double> gammas = sorted_unique_gammas(flat);

    auto value_of = [&](const std::string& variant, double gamma,
                        const std::string& metric) -> std::string {
        std::vector<double> vals;
        for (const auto& [v, r] : rows)
            if (v == variant && r.gamma == gamma && r.metric == metric)
                vals.push_back(r.value);
        if (vals.empty()) return "-";
        double sum = 0.0;
        for (double x : vals) sum += x;
        return fmt3(sum / static_cast<double>(vals.size()));
    };

    std::string md = "# Ablation study\n\n";
    md += "RMSE_median and 1-Wasserstein (% of V_max) per confounding level.\n\n";
    md += "| Configuration |";
    for (double g : gammas) md += " RMSE_med g=" + gamma_label(g) + " |";
    for (double g : gammas) md += " W1 g=" + gamma_label(g) + " |";
    md += "\n|---|";
    for (std::size_t i = 0; i < 2 * gammas.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& [key, label] : variants) {
        md += "| " + label + " |";
        for (double g : gammas) md += " " + value_of(key, g, "rmse_median") + " |";
        for (double g : gammas) md += " " + value_of(key, g, "w1") + " |";
        md += "\n";
    }
    md += "\nAll four metrics per variant are in ablation.csv.\n";
    return md;
}

std::string markdown_seedvar_report(const std::vector<ResultRow>& rows) {
    const std::vector<double> gammas = sorted_unique_gammas(rows);
    const std::vector<std::uint64_t> seeds = sorted_unique_seeds(rows);
    std::string md = "# Seed variability\n\n";
    md += std::to_string(seeds.size()) +
          " seeds per confounding level; mean and sample standard deviation of "
          "each metric (% of V_max).\n\n";
    md += "| gamma | metric | mean | std | seeds |\n|---|---|---|---|---|\n";
    for (double g : gammas)
        for (const std::string& metric : kMetricNames) {
            const CellStat s = cell_stat(rows, g, metric);
            if (s.n == 0) continue;
            md += "| " + gamma_label(g) + " | " + metric + " | " + fmt3(s.mean) +
                  " | " + detail::strf("%.4f", s.stdev) + " | " + std::to_string(s.n) +
                  " |\n";
        }
    return md;
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

std::string svg_metric_plot(const std::vector<ResultRow>& rows, const std::string& metric) {
    std::vector<ResultRow> sel;
    for (const ResultRow& r : rows)
        if (r.metric == metric) sel.push_back(r);
    const std::vector<double> gammas = sorted_unique_gammas(sel);
    const std::vector<std::uint64_t> seeds = sorted_unique_seeds(sel);

    const double width = 640.0, height = 420.0;
    const double ml = 70.0, mr = 20.0, mt = 40.0, mb = 50.0;
    const double pw = width - ml - mr, ph = height - mt - mb;
    double x_min = gammas.empty() ? 0.0 : gammas.front();
    double x_max = gammas.empty() ? 1.0 : gammas.back();
    if (x_max <= x_min) {
        x_min -= 1.0;
        x_max += 1.0;
    }
    double y_max = 0.0;
    for (const ResultRow& r : sel) y_max = std::max(y_max, r.value);
    y_max = y_max > 0.0 ? 1.15 * y_max : 1.0;

    auto sx = [&](double g) { return ml + (g - x_min) / (x_max - x_min) * pw; };
    auto sy = [&](double v) { return mt + ph - v / y_max * ph; };
    auto num = [](double v) { return detail::strf("%.2f", v); };

    const std::vector<std::string> palette{"#1f77b4", "#d62728", "#2ca02c",
                                           "#9467bd", "#ff7f0e", "#8c564b"};
    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) +
         "\" height=\"" + num(height) + "\" viewBox=\"0 0 " + num(width) + " " +
         num(height) + "\">\n";
    s += "<rect width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(width / 2) + "\" y=\"24\" font-family=\"sans-serif\" "
         "font-size=\"16\" text-anchor=\"middle\">" + metric + " vs gamma</text>\n";
    // Axes.
    s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(mt + ph) + "\" x2=\"" +
         num(ml + pw) + "\" y2=\"" + num(mt + ph) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(mt) + "\" x2=\"" + num(ml) +
         "\" y2=\"" + num(mt + ph) + "\" stroke=\"black\"/>\n";
    const int n_ticks = 5;
    for (int i = 0; i <= n_ticks; ++i) {
        const double fx = x_min + (x_max - x_min) * i / n_ticks;
        const double fy = y_max * i / n_ticks;
        s += "<line x1=\"" + num(sx(fx)) + "\" y1=\"" + num(mt + ph) + "\" x2=\"" +
             num(sx(fx)) + "\" y2=\"" + num(mt + ph + 5) + "\" stroke=\"black\"/>\n";
        s += "<text x=\"" + num(sx(fx)) + "\" y=\"" + num(mt + ph + 20) +
             "\" font-family=\"sans-serif\" font-size=\"11\" "
             "text-anchor=\"middle\">" + detail::strf("%.3g", fx) + "</text>\n";
        s += "<line x1=\"" + num(ml - 5) + "\" y1=\"" + num(sy(fy)) + "\" x2=\"" +
             num(ml) + "\" y2=\"" + num(sy(fy)) + "\" stroke=\"black\"/>\n";
        s += "<text x=\"" + num(ml - 8) + "\" y=\"" + num(sy(fy) + 4) +
             "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" +
             detail::strf("%.3g", fy) + "</text>\n";
    }
    s += "<text x=\"" + num(ml + pw / 2) + "\" y=\"" + num(height - 12) +
         "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
         "gamma (confounding)</text>\n";
    s += "<text x=\"18\" y=\"" + num(mt + ph / 2) +
         "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" "
         "transform=\"rotate(-90 18 " + num(mt + ph / 2) + ")\">" + metric +
         " (% of V_max)</text>\n";
    // One polyline per seed.
    for (std::size_t si = 0; si < seeds.size(); ++si) {
        const std::string& color = palette[si % palette.size()];
        std::string pts;
        for (double g : gammas)
            for (const ResultRow& r : sel)
                if (r.seed == seeds[si] && r.gamma == g)
                    pts += num(sx(g)) + "," + num(sy(r.value)) + " ";
        if (!pts.empty())
            s += "<polyline fill=\"none\" stroke=\"" + color +
                 "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        for (double g : gammas)
            for (const ResultRow& r : sel)
                if (r.seed == seeds[si] && r.gamma == g)
                    s += "<circle cx=\"" + num(sx(g)) + "\" cy=\"" + num(sy(r.value)) +
                         "\" r=\"3\" fill=\"" + color + "\"/>\n";
        // Legend.
        const double ly = mt + 8 + 16 * static_cast<double>(si);
        s += "<line x1=\"" + num(ml + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" +
             num(ml + 30) + "\" y2=\"" + num(ly) + "\" stroke=\"" + color +
             "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + num(ml + 36) + "\" y=\"" + num(ly + 4) +
             "\" font-family=\"sans-serif\" font-size=\"11\">seed " +
             std::to_string(seeds[si]) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

// ---------------------------------------------------------------------------
// report command
// ---------------------------------------------------------------------------

std::vector<fs::path> cmd_report(const fs::path& out_dir) {
    if (!fs::exists(out_dir)) throw IoError("output directory not found: " + out_dir.string());
    std::vector<fs::path> written;
    bool found = false;

    // Failure list, if one was recorded by a sweep-style command.
    std::vector<PointOutcome> failures;
    if (fs::exists(out_dir / "failures.txt")) {
        std::istringstream is(detail::read_text_file(out_dir / "failures.txt"));
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            PointOutcome p;
            p.ok = false;
            std::string rest = line;
            if (rest.rfind("variant=", 0) == 0) {
                const std::size_t sp = rest.find(' ');
                p.variant = rest.substr(8, sp - 8);
                rest = rest.substr(sp + 1);
            }
            if (rest.rfind("gamma=", 0) == 0) {
                const std::size_t sp = rest.find(' ');
                p.gamma = std::strtod(rest.c_str() + 6, nullptr);
                rest = rest.substr(sp + 1);
            }
            if (rest.rfind("seed=", 0) == 0) {
                p.seed = std::strtoull(rest.c_str() + 5, nullptr, 10);
                const std::size_t colon = rest.find(": ");
                p.error = colon == std::string::npos ? "" : rest.substr(colon + 2);
            }
            failures.push_back(std::move(p));
        }
    }

    if (fs::exists(out_dir / "results.csv")) {
        found = true;
        const std::vector<ResultRow> rows = read_result_csv(out_dir / "results.csv");
        detail::atomic_write_text(out_dir / "report.md",
                                  markdown_sweep_report(rows, failures));
        written.push_back(out_dir / "report.md");
        for (const std::string& metric : kMetricNames) {
            const fs::path p = out_dir / ("plot_" + metric + ".svg");
            detail::atomic_write_text(p, svg_metric_plot(rows, metric));
            written.push_back(p);
        }
    }
    if (fs::exists(out_dir / "ablation.csv")) {
        found = true;
        const auto rows = read_ablation_csv(out_dir / "ablation.csv");
        detail::atomic_write_text(out_dir / "ablation.md", markdown_ablation_report(rows));
        written.push_back(out_dir / "ablation.md");
    }
    if (fs::exists(out_dir / "seedvar.csv")) {
        found = true;
        const std::vector<ResultRow> rows = read_result_csv(out_dir / "seedvar.csv");
        detail::atomic_write_text(out_dir / "seedvar.md", markdown_seedvar_report(rows));
        written.push_back(out_dir / "seedvar.md");
    }
    if (!found)
        throw IoError("no results.csv, ablation.csv, or seedvar.csv under " +
                      out_dir.string());
    return written;
}

} // namespace cdm
