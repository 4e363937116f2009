#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "io_util.hpp"
#include "json.hpp"
#include "oeseg/io.hpp"

using nlohmann::json;

namespace oeseg {

namespace {

json parse_json_file(const std::string& path, const char* what, int expected_version) {
  std::string bytes = detail::read_file_bytes(path, what);
  json j = json::parse(bytes, nullptr, false);
  if (j.is_discarded()) throw FormatError(std::string(what) + ": invalid JSON in " + path);
  if (!j.contains("version") || !j["version"].is_number_integer() ||
      j["version"].get<int>() != expected_version) {
    throw FormatError(std::string(what) + ": unsupported version in " + path);
  }
  return j;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_manifest(const std::string& path, const SelectionManifest& manifest,
                   const std::string& stamp_json) {
  json j;
  j["version"] = kManifestFormatVersion;
  j["strategy"] = to_string(manifest.strategy);
  j["budget"] = manifest.budget;
  j["seed"] = manifest.seed;
  j["pooling"] = to_string(manifest.pooling);
  j["encoder_fingerprint"] = manifest.encoder_fingerprint;
  j["selected"] = json::array();
  for (const auto& [case_id, scan] : manifest.selected) {
    j["selected"].push_back({{"case", case_id}, {"scan", scan}});
  }
  if (!stamp_json.empty()) j["stamp"] = json::parse(stamp_json);
  detail::write_file_bytes(path, j.dump(2) + "\n", "manifest");
}

SelectionManifest load_manifest(const std::string& path) {
  json j = parse_json_file(path, "manifest", kManifestFormatVersion);
  SelectionManifest m;
  try {
    m.strategy = parse_strategy(j.at("strategy").get<std::string>());
    m.budget = j.at("budget").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.pooling = parse_pooling(j.at("pooling").get<std::string>());
    m.encoder_fingerprint = j.value("encoder_fingerprint", "");
    for (const json& sel : j.at("selected")) {
      m.selected.emplace_back(sel.at("case").get<std::string>(), sel.at("scan").get<int>());
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest: malformed field in " + path + ": " + e.what());
  }
  if (m.selected.size() != m.budget) {
    throw FormatError("manifest: selection count disagrees with budget in " + path);
  }
  return m;
}

void save_history(const std::string& path, const TrainHistory& history,
                  const std::string& stamp_json) {
  json j;
  j["version"] = kHistoryFormatVersion;
  j["stop_reason"] = history.stop_reason;
  j["best_epoch"] = history.best_epoch;
  j["epochs"] = json::array();
  for (std::size_t i = 0; i < history.epochs.size(); ++i) {
    const auto& e = history.epochs[i];
    j["epochs"].push_back({{"epoch", i + 1},
                           {"train_loss", e.train_loss},
                           {"val_loss", e.val_loss},
                           {"learning_rate", e.learning_rate},
                           {"seconds", e.seconds}});
  }
  if (!stamp_json.empty()) j["stamp"] = json::parse(stamp_json);
  detail::write_file_bytes(path, j.dump(2) + "\n", "history");
}

TrainHistory load_history(const std::string& path) {
  json j = parse_json_file(path, "history", kHistoryFormatVersion);
  TrainHistory h;
  try {
    h.stop_reason = j.at("stop_reason").get<std::string>();
    h.best_epoch = j.at("best_epoch").get<int>();
    for (const json& e : j.at("epochs")) {
      h.epochs.push_back({e.at("train_loss").get<double>(), e.at("val_loss").get<double>(),
                          e.at("learning_rate").get<double>(), e.at("seconds").get<double>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("history: malformed field in " + path + ": " + e.what());
  }
  return h;
}

static const char* kSweepHeader = "budget,strategy,seed,mean_dsc,std_dsc,train_seconds";

void save_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::string out = kSweepHeader;
  out += "\n";
  for (const SweepRow& r : rows) {
    out += r.budget + "," + to_string(r.strategy) + "," + std::to_string(r.seed) + "," +
           format_double(r.mean_dsc) + "," + format_double(r.std_dsc) + "," +
           format_double(r.train_seconds) + "\n";
  }
  detail::write_file_bytes(path, out, "sweep csv");
}

std::vector<SweepRow> load_sweep_csv(const std::string& path) {
  std::string bytes = detail::read_file_bytes(path, "sweep csv");
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line) || line != kSweepHeader) {
    throw FormatError("sweep csv: bad header in " + path);
  }
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw FormatError("sweep csv: bad row in " + path);
    SweepRow r;
    r.budget = fields[0];
    r.strategy = parse_strategy(fields[1]);
    r.seed = std::stoull(fields[2]);
    r.mean_dsc = std::stod(fields[3]);
    r.std_dsc = std::stod(fields[4]);
    r.train_seconds = std::stod(fields[5]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

double budget_value(const std::string& token) {
  if (!token.empty() && token.back() == '%') return std::stod(token.substr(0, token.size() - 1));
  return std::stod(token);
}

struct SeriesPoint {
  double x;
  double mean;
};

}  // namespace

void save_sweep_svg(const std::string& path, const std::vector<SweepRow>& rows) {
  // Mean DSC vs budget, one polyline per strategy.
  std::map<Strategy, std::map<double, std::pair<double, int>>> agg;
  for (const SweepRow& r : rows) {
    auto& cell = agg[r.strategy][budget_value(r.budget)];
    cell.first += r.mean_dsc;
    cell.second += 1;
  }

  const double width = 640, height = 420, ml = 60, mr = 150, mt = 30, mb = 50;
  double xmin = 1e300, xmax = -1e300;
  for (auto& [strategy, series] : agg) {
    for (auto& [x, cell] : series) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
  }
  if (agg.empty() || xmin == xmax) {
    xmin = 0;
    xmax = 1;
  }
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto sy = [&](double y) { return height - mb - y * (height - mt - mb); };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<line x1='" << ml << "' y1='" << sy(0) << "' x2='" << width - mr << "' y2='" << sy(0)
      << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << sy(0) << "' x2='" << ml << "' y2='" << mt
      << "' stroke='black'/>\n";
  for (double y = 0.0; y <= 1.0001; y += 0.25) {
    svg << "<text x='" << ml - 8 << "' y='" << sy(y) + 4
        << "' font-size='11' text-anchor='end'>" << y << "</text>\n";
    svg << "<line x1='" << ml - 4 << "' y1='" << sy(y) << "' x2='" << ml << "' y2='" << sy(y)
        << "' stroke='black'/>\n";
  }
  svg << "<text x='" << (ml + width - mr) / 2 << "' y='" << height - 12
      << "' font-size='12' text-anchor='middle'>budget (%)</text>\n";
  svg << "<text x='16' y='" << (mt + height - mb) / 2
      << "' font-size='12' transform='rotate(-90 16 " << (mt + height - mb) / 2
      << ")' text-anchor='middle'>mean DSC</text>\n";

  const std::map<Strategy, std::string> colors = {{Strategy::kCoreset, "#c62828"},
                                                  {Strategy::kRandom, "#1565c0"},
                                                  {Strategy::kUniform, "#2e7d32"}};
  int legend_row = 0;
  for (auto& [strategy, series] : agg) {
    std::vector<SeriesPoint> pts;
    for (auto& [x, cell] : series) pts.push_back({x, cell.first / cell.second});
    std::ostringstream poly;
    for (const SeriesPoint& p : pts) poly << sx(p.x) << "," << sy(p.mean) << " ";
    const std::string& color = colors.at(strategy);
    svg << "<polyline points='" << poly.str() << "' fill='none' stroke='" << color
        << "' stroke-width='2'/>\n";
    for (const SeriesPoint& p : pts) {
      svg << "<circle cx='" << sx(p.x) << "' cy='" << sy(p.mean) << "' r='3' fill='" << color
          << "'/>\n";
      svg << "<text x='" << sx(p.x) << "' y='" << sy(0) + 16
          << "' font-size='11' text-anchor='middle'>" << p.x << "</text>\n";
    }
    double ly = mt + 16 * legend_row++;
    svg << "<line x1='" << width - mr + 10 << "' y1='" << ly << "' x2='" << width - mr + 34
        << "' y2='" << ly << "' stroke='" << color << "' stroke-width='2'/>\n";
    svg << "<text x='" << width - mr + 40 << "' y='" << ly + 4 << "' font-size='12'>"
        << to_string(strategy) << "</text>\n";
  }
  svg << "</svg>\n";
  detail::write_file_bytes(path, svg.str(), "sweep svg");
}

std::string render_sweep_table(const std::vector<SweepRow>& rows) {
  struct Cell {
    std::vector<double> means;
    double seconds = 0.0;
  };
  std::map<std::pair<double, Strategy>, Cell> agg;
  std::map<double, std::string> budget_label;
  for (const SweepRow& r : rows) {
    double b = budget_value(r.budget);
    budget_label[b] = r.budget;
    Cell& c = agg[{b, r.strategy}];
    c.means.push_back(r.mean_dsc);
    c.seconds += r.train_seconds;
  }
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-10s %-18s %-8s %s\n", "budget", "strategy",
                "mean_dsc (std)", "runs", "avg_train_s");
  out << line;
  for (const auto& [key, cell] : agg) {
    double mean = 0.0;
    for (double m : cell.means) mean += m;
    mean /= static_cast<double>(cell.means.size());
    double var = 0.0;
    for (double m : cell.means) var += (m - mean) * (m - mean);
    var /= static_cast<double>(cell.means.size());
    std::snprintf(line, sizeof line, "%-10s %-10s %.4f (%.4f)    %-8zu %.2f\n",
                  budget_label[key.first].c_str(), to_string(key.second).c_str(), mean,
                  std::sqrt(var), cell.means.size(),
                  cell.seconds / static_cast<double>(cell.means.size()));
    out << line;
  }
  return out.str();
}

std::string make_stamp(const std::string& config_dump, const std::vector<std::uint64_t>& seeds) {
  json j;
  j["config_hash"] = "fnv1a:" + fnv1a_hex(config_dump.data(), config_dump.size());
  j["seeds"] = seeds;
  j["format_versions"] = {{"weights", kWeightFormatVersion},
                          {"features", kFeatureFormatVersion},
                          {"manifest", kManifestFormatVersion},
                          {"history", kHistoryFormatVersion}};
  return j.dump();
}

void write_stamp_sidecar(const std::string& artifact_path, const std::string& stamp_json) {
  detail::write_file_bytes(artifact_path + ".stamp.json", stamp_json + "\n", "stamp");
}

}  // namespace oeseg
