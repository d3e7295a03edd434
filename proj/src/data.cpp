#include "flowmoe/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string_view>
#include <system_error>
#include <unistd.h>

namespace flowmoe {

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos
                                        ? std::string_view::npos
                                        : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t'))
      field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' ||
                              field.back() == '\r'))
      field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(std::string_view field, const std::string& where) {
  double value = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty())
    throw DataError(fmt::format("{}: non-numeric field '{}'", where, field));
  if (!std::isfinite(value))
    throw DataError(fmt::format("{}: non-finite value '{}'", where, field));
  return value;
}

int parse_time(std::string_view field, const std::string& where) {
  const double v = parse_double(field, where);
  if (v != std::floor(v) || v < 1 || v > 1e9)
    throw DataError(
        fmt::format("{}: time must be a positive integer, got '{}'", where,
                    field));
  return static_cast<int>(v);
}

}  // namespace

Eigen::Index Dataset::dim() const {
  return cytograms.empty() ? 0 : cytograms.front().dim();
}

void BinGrid::validate() const {
  if (bins < 1) throw UsageError("bin count must be at least 1");
  if (lo.size() != hi.size() || lo.size() == 0)
    throw UsageError("grid bounds must be non-empty and of equal length");
  for (Eigen::Index j = 0; j < lo.size(); ++j) {
    if (!(lo[j] < hi[j]))
      throw UsageError(fmt::format(
          "grid lower bound {} must be below upper bound {} in dimension {}",
          lo[j], hi[j], j));
  }
}

NumericTable read_numeric_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  NumericTable table;
  std::string line;
  if (!std::getline(in, line))
    throw DataError(fmt::format("{}: empty file", path.string()));
  for (auto f : split_csv(line)) table.header.emplace_back(f);
  if (table.header.empty() || table.header.front() != "time")
    throw DataError(
        fmt::format("{}: first column must be 'time'", path.string()));
  const auto ncol = static_cast<Eigen::Index>(table.header.size()) - 1;

  std::vector<double> flat;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv(line);
    const auto where = fmt::format("{}:{}", path.string(), line_no);
    if (static_cast<Eigen::Index>(fields.size()) != ncol + 1)
      throw DataError(fmt::format("{}: expected {} fields, found {}", where,
                                  ncol + 1, fields.size()));
    table.times.push_back(parse_time(fields[0], where));
    for (Eigen::Index j = 0; j < ncol; ++j)
      flat.push_back(parse_double(fields[j + 1], where));
  }
  const auto nrow = static_cast<Eigen::Index>(table.times.size());
  table.values.resize(nrow, ncol);
  for (Eigen::Index i = 0; i < nrow; ++i)
    for (Eigen::Index j = 0; j < ncol; ++j)
      table.values(i, j) = flat[i * ncol + j];
  return table;
}

Dataset ingest_dataset(const std::filesystem::path& cytogram_file,
                       const std::filesystem::path& covariate_file) {
  const auto cov = read_numeric_csv(covariate_file);
  const auto cyt = read_numeric_csv(cytogram_file);
  if (cov.values.cols() < 1)
    throw DataError(fmt::format("{}: no covariate columns",
                                covariate_file.string()));
  if (cyt.values.cols() < 2)
    throw DataError(fmt::format("{}: need time, at least one y column and "
                                "biomass",
                                cytogram_file.string()));
  if (cyt.header.back() != "biomass")
    throw DataError(fmt::format("{}: last column must be 'biomass'",
                                cytogram_file.string()));

  // Covariate rows sorted by time; duplicates rejected.
  std::vector<Eigen::Index> order(cov.times.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return cov.times[a] < cov.times[b];
  });
  Dataset ds;
  ds.covariates.values.resize(cov.values.rows(), cov.values.cols());
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int t = cov.times[order[i]];
    if (!slot.emplace(t, i).second)
      throw DataError(fmt::format("{}: duplicate covariate row for time {}",
                                  covariate_file.string(), t));
    ds.covariates.times.push_back(t);
    ds.covariates.values.row(i) = cov.values.row(order[i]);
  }

  const Eigen::Index d = cyt.values.cols() - 1;
  std::vector<std::vector<Eigen::Index>> members(order.size());
  for (Eigen::Index i = 0; i < cyt.values.rows(); ++i) {
    const int t = cyt.times[i];
    const auto it = slot.find(t);
    // Data line numbers are 1-based after the header.
    if (it == slot.end())
      throw DataError(fmt::format("{}:{}: missing covariate row for time {}",
                                  cytogram_file.string(), i + 2, t));
    const double w = cyt.values(i, d);
    if (!(w > 0.0))
      throw DataError(fmt::format("{}:{}: non-positive weight {}",
                                  cytogram_file.string(), i + 2, w));
    members[it->second].push_back(i);
  }

  ds.cytograms.resize(order.size());
  for (std::size_t s = 0; s < order.size(); ++s) {
    auto& c = ds.cytograms[s];
    c.t = ds.covariates.times[s];
    const auto n = static_cast<Eigen::Index>(members[s].size());
    c.points.resize(n, d);
    c.weights.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      c.points.row(r) = cyt.values.row(members[s][r]).head(d);
      c.weights[r] = cyt.values(members[s][r], d);
    }
  }
  return ds;
}

BinGrid default_grid(std::span<const Cytogram> cytograms, int bins,
                     double expand) {
  Eigen::Index d = 0;
  for (const auto& c : cytograms) d = std::max(d, c.dim());
  if (d == 0) throw DataError("cannot derive a grid from empty data");
  BinGrid grid;
  grid.bins = bins;
  grid.lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  grid.hi = Vector::Constant(d, -std::numeric_limits<double>::infinity());
  for (const auto& c : cytograms) {
    if (c.size() == 0) continue;
    grid.lo = grid.lo.cwiseMin(c.points.colwise().minCoeff().transpose());
    grid.hi = grid.hi.cwiseMax(c.points.colwise().maxCoeff().transpose());
  }
  if (!grid.lo.allFinite())
    throw DataError("cannot derive a grid from data with no particles");
  for (Eigen::Index j = 0; j < d; ++j) {
    double span = grid.hi[j] - grid.lo[j];
    if (span <= 0.0) span = std::max(1.0, std::abs(grid.lo[j]));
    grid.lo[j] -= expand * span;
    grid.hi[j] += expand * span;
  }
  return grid;
}

BinnedCytogram bin_cytogram(const Cytogram& c, const BinGrid& grid,
                            std::size_t* dropped) {
  grid.validate();
  const Eigen::Index d = grid.dim();
  if (c.size() > 0 && c.dim() != d)
    throw UsageError(fmt::format("cytogram {} has dimension {}, grid has {}",
                                 c.t, c.dim(), d));
  const Vector width = (grid.hi - grid.lo) / grid.bins;

  // Linear cell index -> accumulated weight; std::map keeps output ordered.
  std::map<std::int64_t, double> cells;
  std::size_t out_of_range = 0;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    std::int64_t key = 0;
    bool inside = true;
    for (Eigen::Index j = 0; j < d && inside; ++j) {
      const double y = c.points(i, j);
      if (y < grid.lo[j] || y > grid.hi[j]) {
        inside = false;
        break;
      }
      auto idx = static_cast<std::int64_t>(std::floor((y - grid.lo[j]) /
                                                      width[j]));
      idx = std::clamp<std::int64_t>(idx, 0, grid.bins - 1);
      key = key * grid.bins + idx;
    }
    if (!inside) {
      ++out_of_range;
      continue;
    }
    cells[key] += c.weights[i];
  }
  if (dropped) *dropped += out_of_range;

  BinnedCytogram out;
  out.t = c.t;
  out.centers.resize(static_cast<Eigen::Index>(cells.size()), d);
  out.weights.resize(static_cast<Eigen::Index>(cells.size()));
  Eigen::Index row = 0;
  for (const auto& [key, w] : cells) {
    std::int64_t rest = key;
    for (Eigen::Index j = d - 1; j >= 0; --j) {
      const auto idx = rest % grid.bins;
      rest /= grid.bins;
      out.centers(row, j) = grid.lo[j] + (static_cast<double>(idx) + 0.5) *
                                             width[j];
    }
    out.weights[row] = w;
    ++row;
  }
  return out;
}

std::vector<BinnedCytogram> bin_all(std::span<const Cytogram> cytograms,
                                    const BinGrid& grid,
                                    std::size_t* dropped) {
  std::vector<BinnedCytogram> out;
  out.reserve(cytograms.size());
  for (const auto& c : cytograms) out.push_back(bin_cytogram(c, grid, dropped));
  return out;
}

BinnedCytogram as_binned(const Cytogram& c) {
  return BinnedCytogram{c.t, c.points, c.weights};
}

std::vector<BinnedCytogram> as_binned(std::span<const Cytogram> cytograms) {
  std::vector<BinnedCytogram> out;
  out.reserve(cytograms.size());
  for (const auto& c : cytograms) out.push_back(as_binned(c));
  return out;
}

std::vector<BinnedCytogram> select(std::span<const BinnedCytogram> data,
                                   std::span<const Eigen::Index> rows) {
  std::vector<BinnedCytogram> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(data[static_cast<std::size_t>(r)]);
  return out;
}

Matrix select_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

double total_weight(std::span<const BinnedCytogram> data) {
  double total = 0.0;
  for (const auto& b : data) total += b.weights.sum();
  return total;
}

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& contents) {
  auto tmp = path;
  tmp += fmt::format(".tmp.{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot write {}", tmp.string()));
    out << contents;
    out.flush();
    if (!out) throw DataError(fmt::format("write failed for {}", tmp.string()));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw DataError(
        fmt::format("cannot rename {} to {}: {}", tmp.string(),
                    path.string(), ec.message()));
  }
}

void write_cytograms_csv(const std::filesystem::path& path,
                         std::span<const Cytogram> cytograms) {
  Eigen::Index d = 0;
  for (const auto& c : cytograms) d = std::max(d, c.dim());
  std::string out = "time";
  for (Eigen::Index j = 1; j <= d; ++j) out += fmt::format(",y{}", j);
  out += ",biomass\n";
  for (const auto& c : cytograms) {
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      out += fmt::format("{}", c.t);
      for (Eigen::Index j = 0; j < d; ++j)
        out += fmt::format(",{}", c.points(i, j));
      out += fmt::format(",{}\n", c.weights[i]);
    }
  }
  write_file_atomic(path, out);
}

void write_binned_csv(const std::filesystem::path& path,
                      std::span<const BinnedCytogram> binned) {
  Eigen::Index d = 0;
  for (const auto& b : binned) d = std::max(d, b.dim());
  std::string out = "time";
  for (Eigen::Index j = 1; j <= d; ++j) out += fmt::format(",b{}", j);
  out += ",weight\n";
  for (const auto& b : binned) {
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      out += fmt::format("{}", b.t);
      for (Eigen::Index j = 0; j < d; ++j)
        out += fmt::format(",{}", b.centers(i, j));
      out += fmt::format(",{}\n", b.weights[i]);
    }
  }
  write_file_atomic(path, out);
}

void write_covariates_csv(const std::filesystem::path& path,
                          const CovariateMatrix& covariates) {
  std::string out = "time";
  for (Eigen::Index j = 1; j <= covariates.cols(); ++j)
    out += fmt::format(",x{}", j);
  out += "\n";
  for (Eigen::Index i = 0; i < covariates.rows(); ++i) {
    out += fmt::format("{}", covariates.times[i]);
    for (Eigen::Index j = 0; j < covariates.cols(); ++j)
      out += fmt::format(",{}", covariates.values(i, j));
    out += "\n";
  }
  write_file_atomic(path, out);
}

}  // namespace flowmoe
