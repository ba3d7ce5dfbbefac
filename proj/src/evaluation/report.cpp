#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>

#include "ragcap/evaluation.hpp"

namespace ragcap::eval {

bool is_sweep_axis(const std::string& axis) {
  return axis == "lambda" || axis == "top_n" || axis == "db_fraction" || axis == "decoder_blocks";
}

namespace {

struct Column {
  std::string name;
  std::function<double(const MetricReport&)> get;
};

double split_value(const MetricReport& r, const std::string& split, const std::function<double(const SplitMetrics&)>& f) {
  auto it = r.splits.find(split);
  if (it == r.splits.end()) throw ReportError("run " + r.run_id + " has no metrics for split " + split);
  return f(it->second);
}

std::vector<Column> columns() {
  std::vector<Column> out;
  for (const std::string split : {"test-in", "test-out"}) {
    const std::string p = split == "test-in" ? "in" : "out";
    auto add = [&](const std::string& name, std::function<double(const SplitMetrics&)> f) {
      out.push_back({p + "_" + name, [split, f](const MetricReport& r) { return split_value(r, split, f); }});
    };
    add("bleu4", [](const SplitMetrics& m) { return m.bleu4; });
    add("cider", [](const SplitMetrics& m) { return m.cider; });
    add("object_recall", [](const SplitMetrics& m) { return m.recall.objects; });
    add("action_recall", [](const SplitMetrics& m) { return m.recall.actions; });
    add("environment_recall", [](const SplitMetrics& m) { return m.recall.environments; });
    add("retrieval_recall", [](const SplitMetrics& m) { return m.retrieval_recall; });
  }
  return out;
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

Stat stat(const std::vector<double>& xs) {
  Stat s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    for (double x : xs) s.std += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(s.std / static_cast<double>(xs.size() - 1));
  }
  return s;
}

void write_svg(const std::filesystem::path& path, const std::string& axis, const std::vector<double>& xs,
               const std::vector<Stat>& in, const std::vector<Stat>& out) {
  const double w = 480, h = 320, ml = 60, mr = 20, mt = 30, mb = 50;
  double xmin = *std::min_element(xs.begin(), xs.end()), xmax = *std::max_element(xs.begin(), xs.end());
  if (xmax == xmin) xmax = xmin + 1.0;
  double ymax = 0.0;
  for (const auto* series : {&in, &out})
    for (const auto& s : *series) ymax = std::max(ymax, s.mean + s.std);
  if (ymax <= 0.0) ymax = 1.0;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - y / ymax * (h - mt - mb); };

  std::ofstream f(path);
  if (!f) throw ReportError("cannot write " + path.string());
  f << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n", w, h);
  f << fmt::format("<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">CIDEr-D vs {}</text>\n", w / 2, axis);
  f << fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", ml, h - mb, w - mr);
  f << fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", ml, mt, h - mb);
  for (int i = 0; i <= 4; ++i) {
    const double y = ymax * i / 4.0;
    f << fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", ml - 4, py(y) + 4, y);
  }
  for (double x : xs)
    f << fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{:g}</text>\n", px(x), h - mb + 15, x);
  f << fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", (ml + w - mr) / 2, h - 12, axis);

  const std::pair<const std::vector<Stat>*, const char*> series[] = {{&in, "#1f77b4"}, {&out, "#d62728"}};
  for (const auto& [data, color] : series) {
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      pts += fmt::format("{:.1f},{:.1f} ", px(xs[i]), py((*data)[i].mean));
      f << fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"{3}\"/>\n", px(xs[i]),
                       py((*data)[i].mean - (*data)[i].std), py((*data)[i].mean + (*data)[i].std), color);
      f << fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\"/>\n", px(xs[i]), py((*data)[i].mean), color);
    }
    f << fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\"/>\n", pts, color);
  }
  f << fmt::format("<text x=\"{}\" y=\"{}\" fill=\"#1f77b4\">test-in</text>\n", w - mr - 90, mt + 10);
  f << fmt::format("<text x=\"{}\" y=\"{}\" fill=\"#d62728\">test-out</text>\n", w - mr - 90, mt + 24);
  f << "</svg>\n";
}

}  // namespace

std::vector<std::filesystem::path> render_report(const std::vector<RunSummary>& runs,
                                                 const std::filesystem::path& out_dir) {
  if (runs.empty()) throw ReportError("no runs to report");
  std::filesystem::create_directories(out_dir);

  std::vector<std::string> axes;
  std::map<std::string, std::vector<const RunSummary*>> by_axis;
  for (const auto& r : runs) {
    const std::string axis = r.axis.empty() ? "baseline" : r.axis;
    if (!by_axis.count(axis)) axes.push_back(axis);
    by_axis[axis].push_back(&r);
  }

  const auto cols = columns();
  std::vector<std::filesystem::path> written;
  for (const auto& axis : axes) {
    const auto& group = by_axis[axis];
    for (const auto* r : group) {
      if (r->paired_hash != group.front()->paired_hash) {
        throw ReportError("axis " + axis + ": run " + r->run_id + " differs from " + group.front()->run_id +
                          " in keys other than the axis and seeds");
      }
    }
    std::vector<std::string> values;
    std::map<std::string, std::vector<const RunSummary*>> by_value;
    for (const auto* r : group) {
      if (!by_value.count(r->value)) values.push_back(r->value);
      by_value[r->value].push_back(r);
    }

    const auto csv = out_dir / (axis + ".csv");
    std::ofstream f(csv);
    if (!f) throw ReportError("cannot write " + csv.string());
    f << "axis,value,runs,seeds";
    for (const auto& c : cols) f << ',' << c.name << "_mean," << c.name << "_std";
    f << '\n';
    std::vector<double> xs;
    std::vector<Stat> cin, cout;
    for (const auto& v : values) {
      const auto& rs = by_value[v];
      std::string seeds;
      for (const auto* r : rs) seeds += (seeds.empty() ? "" : ";") + r->seed;
      f << axis << ',' << v << ',' << rs.size() << ',' << seeds;
      for (const auto& c : cols) {
        std::vector<double> vals;
        for (const auto* r : rs) vals.push_back(c.get(r->report));
        const Stat s = stat(vals);
        f << fmt::format(",{:.6f},{:.6f}", s.mean, s.std);
        if (c.name == "in_cider") cin.push_back(s);
        if (c.name == "out_cider") cout.push_back(s);
      }
      f << '\n';
      if (is_sweep_axis(axis)) {
        try {
          xs.push_back(std::stod(v));
        } catch (const std::exception&) {
          throw ReportError("axis " + axis + " value '" + v + "' is not numeric");
        }
      }
    }
    written.push_back(csv);

    const auto runs_csv = out_dir / (axis + "_runs.csv");
    std::ofstream rf(runs_csv);
    if (!rf) throw ReportError("cannot write " + runs_csv.string());
    rf << "axis,value,seed,run_id,config_hash";
    for (const auto& c : cols) rf << ',' << c.name;
    rf << '\n';
    for (const auto* r : group) {
      rf << axis << ',' << r->value << ',' << r->seed << ',' << r->run_id << ',' << r->report.config_hash;
      for (const auto& c : cols) rf << fmt::format(",{:.6f}", c.get(r->report));
      rf << '\n';
    }
    written.push_back(runs_csv);

    if (is_sweep_axis(axis)) {
      const auto svg = out_dir / (axis + ".svg");
      write_svg(svg, axis, xs, cin, cout);
      written.push_back(svg);
    }
  }
  return written;
}

}  // namespace ragcap::eval
