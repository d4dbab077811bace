#include "semab/error.hpp"
#include "semab/experiment.hpp"

#include <cstdio>
#include <sstream>

namespace semab {

namespace {

const char* const kMissing = "—";

std::string percent_cell(const Json& agg) {
  if (agg.is_null() || agg.at("mean").is_null()) return kMissing;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * agg.at("mean").get<double>(),
                100.0 * agg.at("std").get<double>());
  return buf;
}

std::string g17(const Json& v) {
  if (v.is_null()) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
  return buf;
}

struct Column {
  std::string header;
  std::string variant;
  std::string metric;
};

void markdown_table(std::ostringstream& out, const Json& record, const std::vector<Column>& columns, bool skew) {
  const Json& splits = record.at("splits");
  const Json& aggregates = record.at("aggregates");
  out << "| Held-out class |";
  if (skew) out << " Skew |";
  for (const Column& c : columns) out << ' ' << c.header << " |";
  out << "\n|---|";
  if (skew) out << "---:|";
  for (std::size_t i = 0; i < columns.size(); ++i) out << "---:|";
  out << '\n';
  const auto lookup = [&](const Column& c) -> const Json* {
    if (!aggregates.contains(c.variant) || !aggregates.at(c.variant).contains(c.metric)) return nullptr;
    return &aggregates.at(c.variant).at(c.metric);
  };
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const Json& s = splits[i];
    out << "| " << s.at("held_out").get<std::string>() << " |";
    if (skew) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * s.at("skew").get<double>());
      out << ' ' << buf << " |";
    }
    for (const Column& c : columns) {
      const Json* block = lookup(c);
      out << ' ' << (block ? percent_cell(block->at("per_split").at(i)) : kMissing) << " |";
    }
    out << '\n';
  }
  out << "| Average |";
  if (skew) {
    double total = 0.0;
    for (const Json& s : splits) total += s.at("skew").get<double>();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", splits.empty() ? 0.0 : 100.0 * total / static_cast<double>(splits.size()));
    out << ' ' << buf << " |";
  }
  for (const Column& c : columns) {
    const Json* block = lookup(c);
    out << ' ' << (block ? percent_cell(block->at("average")) : kMissing) << " |";
  }
  out << '\n';
}

}  // namespace

ReportFormat parse_report_format(std::string_view name) {
  if (name == "markdown" || name == "md") return ReportFormat::markdown;
  if (name == "csv") return ReportFormat::csv;
  throw Error("unknown_format", "unknown report format '" + std::string(name) + "'");
}

std::string emit_report(const Json& record, ReportFormat format) {
  try {
    const Json& cfg = record.at("config");
    std::vector<std::string> variants;
    for (const Json& v : cfg.at("variants")) variants.push_back(v.at("name").get<std::string>());
    std::vector<std::string> model_scorers, baselines;
    for (const Json& s : cfg.at("scorers")) {
      const std::string name = s.at("name").get<std::string>();
      (name == "gmm" || name == "edge" ? baselines : model_scorers).push_back(name);
    }

    std::ostringstream out;
    if (format == ReportFormat::csv) {
      out << "table,variant,metric,split,held_out,mean,std,n_trials\n";
      const Json& aggregates = record.at("aggregates");
      for (const std::string& v : variants) {
        if (!aggregates.contains(v)) continue;
        for (const auto& [metric, block] : aggregates.at(v).items()) {
          const std::string table = metric == "test_accuracy" ? "accuracy" : "average_precision";
          for (const Json& e : block.at("per_split")) {
            out << table << ',' << v << ',' << metric << ',' << e.at("split").get<std::size_t>() << ','
                << e.at("held_out").get<std::string>() << ',' << g17(e.at("mean")) << ',' << g17(e.at("std")) << ','
                << e.at("n_trials").get<std::size_t>() << '\n';
          }
          const Json& avg = block.at("average");
          out << table << ',' << v << ',' << metric << ",average,," << (avg.is_null() ? "" : g17(avg.at("mean")))
              << ',' << (avg.is_null() ? "" : g17(avg.at("std"))) << ','
              << (avg.is_null() ? 0 : avg.at("n_trials").get<std::size_t>()) << '\n';
        }
      }
      return out.str();
    }

    out << "# Anomaly detection results\n\n";
    out << "Average precision (%) per held-out class, mean ± std over trials.\n\n";
    std::vector<Column> columns;
    // baselines do not depend on the training variant
    for (const std::string& b : baselines) columns.push_back({b, variants.front(), b});
    for (const std::string& v : variants) {
      for (const std::string& s : model_scorers) {
        columns.push_back({variants.size() > 1 ? v + " " + s : s, v, s});
      }
    }
    markdown_table(out, record, columns, !baselines.empty());
    if (!model_scorers.empty()) {
      out << "\nTest accuracy (%) on the normal classes.\n\n";
      std::vector<Column> acc;
      for (const std::string& v : variants) acc.push_back({v, v, "test_accuracy"});
      markdown_table(out, record, acc, false);
    }
    return out.str();
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_record", std::string("malformed record: ") + e.what());
  }
}

}  // namespace semab
