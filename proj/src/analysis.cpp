#include "stagedepth/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "stagedepth/errors.hpp"
#include "stagedepth/trainer.hpp"

namespace stagedepth {

double linear_cka(const torch::Tensor& X, const torch::Tensor& Y) {
  if (X.dim() != 2 || Y.dim() != 2) throw ShapeError("CKA inputs must be 2-D");
  if (X.size(0) != Y.size(0)) throw ShapeError("CKA inputs need the same number of rows");
  if (X.size(0) < 2) throw InvalidConfig("CKA needs at least two rows");
  torch::NoGradGuard guard;
  auto x = X.to(torch::kDouble);
  auto y = Y.to(torch::kDouble);
  x = x - x.mean(0, true);
  y = y - y.mean(0, true);
  const double nx = x.norm().item<double>();
  const double ny = y.norm().item<double>();
  const double sx = std::max(1.0, X.abs().max().item<double>());
  const double sy = std::max(1.0, Y.abs().max().item<double>());
  if (nx <= 1e-12 * sx * std::sqrt(double(X.numel())) || ny <= 1e-12 * sy * std::sqrt(double(Y.numel()))) {
    throw Undefined("CKA of a zero-variance input");
  }
  // Scale first so the fourth-power terms stay in range.
  x = x / nx;
  y = y / ny;
  const double cross = torch::mm(y.t(), x).pow(2).sum().item<double>();
  const double xx = torch::mm(x.t(), x).norm().item<double>();
  const double yy = torch::mm(y.t(), y).norm().item<double>();
  return cross / (xx * yy);
}

torch::Tensor pooled_rows(const torch::Tensor& feature_map) {
  if (feature_map.dim() != 4) throw ShapeError("boundary map must be B x C x H x W");
  auto p = torch::adaptive_avg_pool2d(feature_map, {4, 4});   // B x C x 4 x 4
  return p.permute({0, 2, 3, 1}).reshape({-1, feature_map.size(1)});
}

std::map<std::string, BoundaryMatrices> collect_boundary_features(DetectorModel& model,
                                                                  const std::vector<Scene>& scenes,
                                                                  int batch_size, int max_samples,
                                                                  int max_batches) {
  if (batch_size < 1 || max_samples < 1 || max_batches < 1) {
    throw InvalidConfig("batch size, sample cap and batch cap must be positive");
  }
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  const auto config = super_config(model->arch());
  std::map<std::string, std::vector<torch::Tensor>> ess, full;
  std::int64_t rows = 0;
  const int n = static_cast<int>(scenes.size());
  for (int b = 0, start = 0; b < max_batches && start < n && rows < max_samples; ++b, start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto out = forward(model, images_tensor(scenes, idx), config, Capture::Both);
    for (const auto& [id, pair] : out.boundary_features) {
      if (!pair.essential || !pair.full) continue;
      ess[id].push_back(pooled_rows(*pair.essential).to(torch::kDouble));
      full[id].push_back(pooled_rows(*pair.full).to(torch::kDouble));
    }
    rows += static_cast<std::int64_t>(idx.size()) * 16;
  }
  if (was_training) model->train();
  std::map<std::string, BoundaryMatrices> out;
  const auto keep = std::min<std::int64_t>(rows, max_samples);
  for (auto& [id, parts] : ess) {
    out[id] = {torch::cat(parts).narrow(0, 0, keep), torch::cat(full[id]).narrow(0, 0, keep)};
  }
  return out;
}

double CkaReport::mean_over(const std::vector<std::string>& ids) const {
  double s = 0.0;
  int k = 0;
  for (const auto& id : ids) {
    auto it = stages.find(id);
    if (it == stages.end()) continue;
    s += it->second.cka;
    ++k;
  }
  if (k == 0) throw InvalidConfig("no listed stage is present in the CKA report");
  return s / k;
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

}  // namespace

CkaReport cka_report(const std::map<std::string, BoundaryMatrices>& features, int bootstrap_n,
                     std::uint64_t seed) {
  if (bootstrap_n < 0) throw InvalidConfig("bootstrap count must be non-negative");
  CkaReport report;
  for (const auto& [id, m] : features) {
    CkaEntry e;
    e.n_samples = m.essential.size(0);
    e.cka = linear_cka(m.essential, m.full);
    e.ci_low = e.cka;
    e.ci_high = e.cka;
    if (bootstrap_n > 0) {
      std::mt19937_64 rng(seed ^ std::hash<std::string>{}(id));
      std::uniform_int_distribution<std::int64_t> pick(0, e.n_samples - 1);
      std::vector<double> samples;
      samples.reserve(bootstrap_n);
      std::vector<std::int64_t> idx(e.n_samples);
      for (int r = 0; r < bootstrap_n; ++r) {
        for (auto& i : idx) i = pick(rng);
        auto t = torch::tensor(idx, torch::kLong);
        try {
          samples.push_back(linear_cka(m.essential.index_select(0, t), m.full.index_select(0, t)));
        } catch (const Undefined&) {
          // A degenerate resample carries no information about the interval.
        }
      }
      if (!samples.empty()) {
        // Percentile interval, widened to contain the point estimate.
        e.ci_low = std::min(e.cka, percentile(samples, 0.025));
        e.ci_high = std::max(e.cka, percentile(samples, 0.975));
      }
    }
    report.stages[id] = e;
  }
  return report;
}

CkaReport cka_report(DetectorModel& model, const std::vector<Scene>& scenes, int bootstrap_n,
                     int batch_size, int max_samples, int max_batches, std::uint64_t seed) {
  return cka_report(collect_boundary_features(model, scenes, batch_size, max_samples, max_batches),
                    bootstrap_n, seed);
}

namespace {

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

std::string cka_csv(const CkaReport& report) {
  std::ostringstream os;
  os << "stage,cka,ci_low,ci_high,n_samples\n";
  for (const auto& [id, e] : report.stages) {
    os << id << "," << fixed(e.cka) << "," << fixed(e.ci_low) << "," << fixed(e.ci_high) << ","
       << e.n_samples << "\n";
  }
  return os.str();
}

void mark_pareto(std::vector<SweepRow>& rows) {
  for (auto& r : rows) {
    r.pareto = true;
    for (const auto& o : rows) {
      const bool no_worse = o.flops <= r.flops && o.report.ap >= r.report.ap;
      const bool better = o.flops < r.flops || o.report.ap > r.report.ap;
      if (no_worse && better) {
        r.pareto = false;
        break;
      }
    }
  }
}

std::vector<SweepRow> depth_sweep(DetectorModel& model, const std::vector<Scene>& scenes,
                                  const std::vector<DepthConfiguration>& configs, int batch_size) {
  if (scenes.empty()) throw InvalidConfig("sweep needs evaluation scenes");
  const std::pair<int, int> hw{scenes[0].height, scenes[0].width};
  std::vector<SweepRow> rows;
  for (const auto& c : configs) {
    SweepRow r;
    r.config = c;
    r.flops = flops_estimate(model->arch(), c, hw);
    r.report = evaluate_model(model, scenes, c, batch_size);
    rows.push_back(r);
  }
  mark_pareto(rows);
  return rows;
}

std::string sweep_csv(const ArchSpec& arch, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "config,decoder_exit,flops";
  for (const auto& [name, v] : APReport{}.fields()) os << "," << name;
  os << ",pareto\n";
  for (const auto& r : rows) {
    os << config_bitstring(arch, r.config) << "," << r.config.decoder_exit << "," << fixed(r.flops, 0);
    for (const auto& [name, v] : r.report.fields()) os << "," << fixed(v);
    os << "," << (r.pareto ? 1 : 0) << "\n";
  }
  return os.str();
}

std::vector<SweepRow> read_sweep_csv(const ArchSpec& arch, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 16) throw InvalidSpec("sweep row has " + std::to_string(cells.size()) + " columns");
    SweepRow r;
    r.config = parse_config(arch, cells[0], std::stoi(cells[1]));
    r.flops = std::stod(cells[2]);
    double* f[] = {&r.report.ap,    &r.report.ap50,     &r.report.ap75,    &r.report.ap_small,
                   &r.report.ap_medium, &r.report.ap_large, &r.report.ar1, &r.report.ar10,
                   &r.report.ar100, &r.report.ar_small, &r.report.ar_medium, &r.report.ar_large};
    for (int i = 0; i < 12; ++i) *f[i] = std::stod(cells[3 + i]);
    r.pareto = cells[15] == "1";
    rows.push_back(r);
  }
  return rows;
}

std::string pareto_svg(const std::vector<SweepRow>& rows, const std::string& title) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 55;
  double fmin = 1e300, fmax = -1e300, amin = 1e300, amax = -1e300;
  for (const auto& r : rows) {
    fmin = std::min(fmin, r.flops / 1e6);
    fmax = std::max(fmax, r.flops / 1e6);
    amin = std::min(amin, r.report.ap);
    amax = std::max(amax, r.report.ap);
  }
  if (rows.empty()) fmin = amin = 0, fmax = amax = 1;
  if (fmax - fmin < 1e-9) fmax = fmin + 1;
  if (amax - amin < 1e-9) amax = amin + 0.01;
  const double pad_a = 0.05 * (amax - amin);
  amin -= pad_a;
  amax += pad_a;
  auto px = [&](double f) { return L + (f - fmin) / (fmax - fmin) * (W - L - R); };
  auto py = [&](double a) { return H - B - (a - amin) / (amax - amin) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = fmin + (fmax - fmin) * i / 4, a = amin + (amax - amin) * i / 4;
    os << "<text x=\"" << fixed(px(f), 1) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
       << fixed(f, 2) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(a) + 4, 1) << "\" text-anchor=\"end\">" << fixed(a, 3)
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">MMACs per image</text>\n";
  os << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">AP@[.50:.95]</text>\n";
  for (const auto& r : rows) {
    os << "<circle cx=\"" << fixed(px(r.flops / 1e6), 1) << "\" cy=\"" << fixed(py(r.report.ap), 1)
       << "\" r=\"2.5\" fill=\"" << (r.pareto ? "#c0392b" : "#7f8c8d") << "\" fill-opacity=\"0.7\"/>\n";
  }
  std::vector<const SweepRow*> front;
  for (const auto& r : rows) {
    if (r.pareto) front.push_back(&r);
  }
  std::sort(front.begin(), front.end(), [](const SweepRow* a, const SweepRow* b) { return a->flops < b->flops; });
  if (front.size() > 1) {
    os << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.5\" points=\"";
    for (const auto* r : front) os << fixed(px(r->flops / 1e6), 1) << "," << fixed(py(r->report.ap), 1) << " ";
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

PrBreakdown pr_breakdown(const std::vector<Detection>& predictions_super,
                         const std::vector<Detection>& predictions_base,
                         const std::vector<GroundTruth>& ground_truth, const EvalOptions& options) {
  PrBreakdown b;
  b.super_net = evaluate_map(predictions_super, ground_truth, options);
  b.base_net = evaluate_map(predictions_base, ground_truth, options);
  const auto s = b.super_net.fields();
  const auto t = b.base_net.fields();
  for (std::size_t i = 0; i < s.size(); ++i) {
    b.rows.emplace_back(s[i].first, s[i].second, t[i].second, s[i].second - t[i].second);
  }
  return b;
}

std::string pr_breakdown_table(const PrBreakdown& b) {
  std::ostringstream os;
  os << "| metric | super-net | base-net | delta |\n|---|---|---|---|\n";
  for (const auto& [name, s, t, d] : b.rows) {
    os << "| " << name << " | " << fixed(s, 4) << " | " << fixed(t, 4) << " | " << (d >= 0 ? "+" : "")
       << fixed(d, 4) << " |\n";
  }
  return os.str();
}

}  // namespace stagedepth
