#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "avglm/error.hpp"
#include "avglm/lstm.hpp"

namespace avglm {

// Per-(source step j, target step t, unit) contribution of input j to the
// cell state at t: (prod_{k=j+1..t} f_k) * i_j * cand_j. Summing over j <= t
// reproduces c_t exactly when the run started from c_0 = 0.
struct ContributionTensor {
  std::size_t layer = 0;
  std::size_t steps = 0;  // T; source/target indices are 1-based
  std::size_t units = 0;
  std::vector<double> values;  // [(j-1)*T + (t-1)]*units + u, zero for j > t

  double at(std::size_t source, std::size_t target, std::size_t unit) const {
    return values[((source - 1) * steps + (target - 1)) * units + unit];
  }
};

template <typename S>
ContributionTensor decompose(const GateTrace<S>& trace, std::size_t layer,
                             std::size_t batch_row = 0) {
  if (!trace.recording)
    throw ContractError("decompose: trace was captured without gate recording");
  if (!trace.zero_init)
    throw ContractError("decompose: the decomposition identity needs a zero initial state");
  if (layer >= trace.layers)
    throw ContractError("decompose: layer " + std::to_string(layer) + " out of range");
  if (trace.length() > 0 && batch_row >= trace.batch)
    throw ContractError("decompose: batch row out of range");

  const std::size_t T = trace.length();
  const std::size_t units = trace.hidden;
  ContributionTensor out;
  out.layer = layer;
  out.steps = T;
  out.units = units;
  out.values.assign(T * T * units, 0.0);

  auto gate_row = [&](const Tensor<S>& t, std::size_t u) {
    return double(t.data()[batch_row * units + u]);
  };
  for (std::size_t u = 0; u < units; ++u) {
    for (std::size_t j = 1; j <= T; ++j) {
      const auto& gj = trace.steps[j - 1][layer];
      double running = gate_row(gj.input, u) * gate_row(gj.candidate, u);
      out.values[((j - 1) * T + (j - 1)) * units + u] = running;
      for (std::size_t t = j + 1; t <= T; ++t) {
        running *= gate_row(trace.steps[t - 1][layer].forget, u);
        out.values[((j - 1) * T + (t - 1)) * units + u] = running;
      }
    }
  }
  return out;
}

// Max over (t, unit) of |sum_j contribution(j,t) - c_t|: how exactly the
// decomposition reassembles the traced cell states.
template <typename S>
double decomposition_residual(const ContributionTensor& contrib, const GateTrace<S>& trace,
                              std::size_t batch_row = 0) {
  const std::size_t T = contrib.steps, units = contrib.units;
  double worst = 0.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const auto& cell = trace.steps[t - 1][contrib.layer].cell;
    for (std::size_t u = 0; u < units; ++u) {
      double total = 0.0;
      for (std::size_t j = 1; j <= t; ++j) total += contrib.at(j, t, u);
      worst = std::max(worst, std::fabs(total - double(cell.data()[batch_row * units + u])));
    }
  }
  return worst;
}

struct PersistenceRun {
  std::size_t unit = 0;
  std::size_t start = 0;  // 1-based timestep
  std::size_t length = 0;
};

// Maximal runs of consecutive steps whose forget activation stays at or
// above the threshold. A lone qualifying step is a run of length 1.
struct PersistenceStats {
  std::size_t layer = 0;
  std::size_t steps = 0;
  std::size_t units = 0;
  double theta = 0.9;
  std::vector<PersistenceRun> runs;                // ordered by (unit, start)
  std::map<std::size_t, std::size_t> histogram;    // run length -> count
  double mean_run_length = 0.0;                    // 0 when there are no runs
};

template <typename S>
PersistenceStats persistence_lengths(const GateTrace<S>& trace, std::size_t layer,
                                     double theta = 0.9, std::size_t batch_row = 0) {
  if (!trace.recording)
    throw ContractError("persistence_lengths: trace was captured without gate recording");
  if (theta < 0.0 || theta >= 1.0)
    throw ContractError("persistence_lengths: theta must lie in [0, 1)");
  if (layer >= trace.layers)
    throw ContractError("persistence_lengths: layer out of range");

  const std::size_t T = trace.length();
  const std::size_t units = trace.hidden;
  PersistenceStats stats;
  stats.layer = layer;
  stats.steps = T;
  stats.units = units;
  stats.theta = theta;

  std::size_t total_length = 0;
  for (std::size_t u = 0; u < units; ++u) {
    std::size_t run_start = 0, run_len = 0;
    for (std::size_t t = 1; t <= T; ++t) {
      const auto& f = trace.steps[t - 1][layer].forget;
      const bool held = double(f.data()[batch_row * units + u]) >= theta;
      if (held) {
        if (run_len == 0) run_start = t;
        ++run_len;
      }
      if ((!held || t == T) && run_len > 0) {
        stats.runs.push_back({u, run_start, run_len});
        ++stats.histogram[run_len];
        total_length += run_len;
        run_len = 0;
      }
    }
  }
  if (!stats.runs.empty()) stats.mean_run_length = double(total_length) / double(stats.runs.size());
  return stats;
}

namespace detail {

inline std::string csv_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// CSV: layer,source_step,target_step,unit,value — deterministic row order,
// T(T+1)/2 * units rows per layer, values exact under round trip.
inline void export_decomposition_csv(const std::vector<ContributionTensor>& tensors,
                                     const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "layer,source_step,target_step,unit,value\n";
  for (const auto& ct : tensors)
    for (std::size_t j = 1; j <= ct.steps; ++j)
      for (std::size_t t = j; t <= ct.steps; ++t)
        for (std::size_t u = 0; u < ct.units; ++u)
          f << ct.layer << ',' << j << ',' << t << ',' << u << ','
            << detail::csv_g17(ct.at(j, t, u)) << '\n';
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<ContributionTensor> import_decomposition_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "layer,source_step,target_step,unit,value")
    throw DataError("bad decomposition CSV header in " + path);

  // first pass: extents per layer
  struct Extent {
    std::size_t steps = 0, units = 0;
  };
  std::map<std::size_t, Extent> extents;
  struct Row {
    std::size_t layer, j, t, u;
    double v;
  };
  std::vector<Row> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    Row r;
    char* end = nullptr;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw DataError("bad decomposition CSV row: " + line);
    r.layer = std::stoull(fields[0]);
    r.j = std::stoull(fields[1]);
    r.t = std::stoull(fields[2]);
    r.u = std::stoull(fields[3]);
    r.v = std::strtod(fields[4].c_str(), &end);
    auto& e = extents[r.layer];
    e.steps = std::max(e.steps, r.t);
    e.units = std::max(e.units, r.u + 1);
    rows.push_back(r);
  }
  std::vector<ContributionTensor> out;
  std::map<std::size_t, std::size_t> index;
  for (const auto& [layer, e] : extents) {
    ContributionTensor ct;
    ct.layer = layer;
    ct.steps = e.steps;
    ct.units = e.units;
    ct.values.assign(e.steps * e.steps * e.units, 0.0);
    index[layer] = out.size();
    out.push_back(std::move(ct));
  }
  for (const auto& r : rows) {
    auto& ct = out[index[r.layer]];
    ct.values[((r.j - 1) * ct.steps + (r.t - 1)) * ct.units + r.u] = r.v;
  }
  return out;
}

// CSV: layer,unit,run_start,run_length
inline void export_persistence_csv(const std::vector<PersistenceStats>& stats,
                                   const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "layer,unit,run_start,run_length\n";
  for (const auto& st : stats)
    for (const auto& run : st.runs)
      f << st.layer << ',' << run.unit << ',' << run.start << ',' << run.length << '\n';
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace avglm
