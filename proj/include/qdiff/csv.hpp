// Copyright 2026 The qdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <charconv>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qdiff/analysis.hpp"
#include "qdiff/error.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Comma-separated, one header line, '\n' line ends. Floats are written in the
// shortest form that parses back to the same value.

inline constexpr std::string_view kCurveHeader = "step,t,mse";
inline constexpr std::string_view kProfileHeader = "layer,t,min,p1,p99,max";
inline constexpr std::string_view kCompareHeader =
    "strategy,bits_w,bits_a,energy_distance,mode_coverage_min,final_mse";
inline constexpr std::string_view kLossHeader = "step,loss";
inline constexpr std::string_view kQualityHeader = "metric,value";

inline std::string samples_header(std::size_t dim) {
  std::string h = "sample_id,t";
  for (std::size_t d = 0; d < dim; ++d) h += ",dim" + std::to_string(d);
  return h;
}

template <typename N>
std::string fmt(N v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                         : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// Rejects a header other than `expected` and rows with the wrong column count.
inline CsvTable parse_csv(const std::string& text, std::string_view expected) {
  std::istringstream in(text);
  std::string line;
  CsvTable table;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kIo, "empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == expected, ErrorKind::kIo,
          "unexpected CSV header '" + line + "', expected '" + std::string(expected) + "'");
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    require(fields.size() == table.header.size(), ErrorKind::kIo,
            "CSV row has " + std::to_string(fields.size()) + " columns, expected " +
                std::to_string(table.header.size()));
    table.rows.push_back(std::move(fields));
  }
  return table;
}

template <typename N>
N csv_number(const std::string& field) {
  N out{};
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  require(ec == std::errc{} && ptr == end && !field.empty(), ErrorKind::kIo,
          "malformed CSV number '" + field + "'");
  return out;
}

template <typename T>
std::string samples_csv(const Tensor<T>& x, const std::vector<int>& t) {
  require(t.size() == x.rows(), ErrorKind::kShape, "one timestep per sample row required");
  std::string out = samples_header(x.cols()) + "\n";
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out += std::to_string(i) + "," + std::to_string(t[i]);
    for (std::size_t d = 0; d < x.cols(); ++d) out += "," + fmt(x(i, d));
    out += "\n";
  }
  return out;
}

// Every recorded state of a trajectory, noise end first, then the final sample
// with t = 0. sample_id is the row within the batch.
template <typename T>
std::string trajectory_csv(const Trajectory<T>& traj) {
  const std::size_t dim = traj.final_sample.cols();
  std::string out = samples_header(dim) + "\n";
  auto emit = [&](const Tensor<T>& x, int t) {
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out += std::to_string(i) + "," + std::to_string(t);
      for (std::size_t d = 0; d < dim; ++d) out += "," + fmt(x(i, d));
      out += "\n";
    }
  };
  for (std::size_t k = 0; k < traj.states.size(); ++k) emit(traj.states[k], traj.t[k]);
  emit(traj.final_sample, 0);
  return out;
}

struct SampleRows {
  Tensor<float> x;
  std::vector<int> t;
};

inline SampleRows parse_samples_csv(const std::string& text) {
  std::istringstream in(text);
  std::string first;
  std::getline(in, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();
  const std::size_t cols = split_csv_line(first).size();
  require(cols >= 3, ErrorKind::kIo, "sample CSV needs at least one dim column");
  const CsvTable table = parse_csv(text, samples_header(cols - 2));
  SampleRows out;
  out.x = Tensor<float>({table.rows.size(), cols - 2});
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    out.t.push_back(csv_number<int>(table.rows[r][1]));
    for (std::size_t d = 0; d + 2 < cols; ++d) out.x(r, d) = csv_number<float>(table.rows[r][d + 2]);
  }
  return out;
}

inline std::string curve_csv(const TimestepErrorCurve& c) {
  std::string out = std::string(kCurveHeader) + "\n";
  for (const auto& p : c.points) {
    out += std::to_string(p.step) + "," + std::to_string(p.t) + "," + fmt(p.mse) + "\n";
  }
  return out;
}

inline TimestepErrorCurve parse_curve_csv(const std::string& text) {
  TimestepErrorCurve c;
  for (const auto& row : parse_csv(text, kCurveHeader).rows) {
    c.points.push_back({csv_number<int>(row[0]), csv_number<int>(row[1]), csv_number<double>(row[2])});
  }
  return c;
}

inline std::string profile_csv(const ActivationProfile& p) {
  std::string out = std::string(kProfileHeader) + "\n";
  for (const auto& c : p.cells) {
    out += c.layer + "," + std::to_string(c.t) + "," + fmt(c.stats.min) + "," + fmt(c.stats.p1) +
           "," + fmt(c.stats.p99) + "," + fmt(c.stats.max) + "\n";
  }
  return out;
}

inline ActivationProfile parse_profile_csv(const std::string& text) {
  ActivationProfile p;
  for (const auto& row : parse_csv(text, kProfileHeader).rows) {
    p.cells.push_back({row[0], csv_number<int>(row[1]),
                       {csv_number<double>(row[2]), csv_number<double>(row[3]),
                        csv_number<double>(row[4]), csv_number<double>(row[5])}});
  }
  return p;
}

inline std::string compare_csv(const std::vector<StrategyRow>& rows) {
  std::string out = std::string(kCompareHeader) + "\n";
  for (const auto& r : rows) {
    out += r.strategy + "," + std::to_string(r.bits_w) + "," + std::to_string(r.bits_a) + "," +
           fmt(r.quality.energy_distance) + "," + fmt(r.quality.coverage_min()) + "," +
           fmt(r.final_mse()) + "\n";
  }
  return out;
}

inline std::string loss_csv(const std::vector<double>& losses) {
  std::string out = std::string(kLossHeader) + "\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += std::to_string(i) + "," + fmt(losses[i]) + "\n";
  return out;
}

// energy_distance, mode_coverage_min, then mode_coverage.<k> per mode.
inline std::string quality_csv(const QualityReport& q) {
  std::string out = std::string(kQualityHeader) + "\n";
  out += "energy_distance," + fmt(q.energy_distance) + "\n";
  out += "mode_coverage_min," + fmt(q.coverage_min()) + "\n";
  for (std::size_t k = 0; k < q.coverage.size(); ++k) {
    out += "mode_coverage." + std::to_string(k) + "," + fmt(q.coverage[k]) + "\n";
  }
  return out;
}

}  // namespace qdiff
