// SPDX-License-Identifier: Apache-2.0
//
// Stored (mean luminance, chosen exposure) pairs and the quadratic
// least-squares estimate of a user's preferred initial exposure.
#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "icenet/error.hpp"
#include "icenet/image.hpp"

namespace icenet {

inline constexpr std::size_t kPersonalizationMinObservations = 4;  // active when M > 3
inline constexpr double kDefaultInitialEta = 0.5;

inline double mean_luminance(const LuminanceImage& y) { return mean_value(y); }

struct Observation {
  double y = 0.0;    // mean luminance, [0, 255]
  double eta = 0.0;  // chosen exposure, [0, 1]
  bool operator==(const Observation&) const = default;
};

inline void validate_observation(const Observation& o) {
  if (!(o.y >= 0.0 && o.y <= kYMax)) throw RangeError("observation luminance must lie in [0, 255]");
  if (!(o.eta >= 0.0 && o.eta <= 1.0)) throw RangeError("observation exposure must lie in [0, 1]");
}

namespace detail {

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError(where + ": bad number '" + std::string(s) + "'");
  return v;
}

inline std::string observation_line(const Observation& o) {
  return format_double(o.y) + "\t" + format_double(o.eta) + "\n";
}

}  // namespace detail

/// Append-only list of observations, optionally backed by a file with one
/// "y<TAB>eta" line per entry.
class ObservationStore {
 public:
  ObservationStore() = default;

  /// Missing file -> empty store bound to `path`.
  static ObservationStore open(const std::filesystem::path& path) {
    ObservationStore store;
    store.path_ = path;
    std::ifstream in(path);
    if (!in) {
      if (std::filesystem::exists(path)) throw std::runtime_error("cannot read observation file " + path.string());
      return store;
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = path.string() + ":" + std::to_string(lineno);
      const auto tab = line.find('\t');
      if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
        throw FormatError(where + ": expected 'y<TAB>eta'");
      }
      const std::string_view view(line);
      Observation o{detail::parse_double(view.substr(0, tab), where), detail::parse_double(view.substr(tab + 1), where)};
      try {
        validate_observation(o);
      } catch (const RangeError& e) {
        throw FormatError(where + ": " + e.what());
      }
      store.items_.push_back(o);
    }
    return store;
  }

  /// Appends in memory and, for a file-backed store, as a single write(2)
  /// on an O_APPEND descriptor so concurrent readers see whole lines.
  void append(const Observation& o) {
    validate_observation(o);
    if (!path_.empty()) {
      const std::string line = detail::observation_line(o);
      if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
      const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
      if (fd < 0) throw std::runtime_error("cannot open " + path_.string() + ": " + std::strerror(errno));
      const ssize_t n = ::write(fd, line.data(), line.size());
      const int err = errno;
      ::close(fd);
      if (n != static_cast<ssize_t>(line.size())) {
        throw std::runtime_error("short write to " + path_.string() + ": " + std::strerror(err));
      }
    }
    items_.push_back(o);
  }

  /// Writes the whole store to `path` (temporary file, then rename).
  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
      for (const auto& o : items_) out << detail::observation_line(o);
      if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  std::span<const Observation> items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool personalization_active() const noexcept { return items_.size() >= kPersonalizationMinObservations; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<Observation> items_;
};

class PersonalizationUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// eta = a y^2 + b y + c.
struct QuadraticFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  // Fewer than three distinct luminances: the quadratic is not determined
  // and a lower-degree fit was used.
  bool degenerate = false;

  double operator()(double y) const noexcept { return (a * y + b) * y + c; }
};

inline double fit_residual(const QuadraticFit& f, std::span<const Observation> obs) {
  double r = 0.0;
  for (const auto& o : obs) {
    const double d = f(o.y) - o.eta;
    r += d * d;
  }
  return r;
}

namespace detail {

// Gaussian elimination with partial pivoting; false if a pivot vanishes.
template <std::size_t N>
bool solve_pivoting(std::array<std::array<double, N>, N> m, std::array<double, N> rhs, std::array<double, N>& x) {
  double scale = 0.0;
  for (const auto& row : m)
    for (double v : row) scale = std::max(scale, std::abs(v));
  for (std::size_t col = 0; col < N; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < N; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    if (!(std::abs(m[piv][col]) > 1e-13 * scale)) return false;
    std::swap(m[col], m[piv]);
    std::swap(rhs[col], rhs[piv]);
    for (std::size_t r = col + 1; r < N; ++r) {
      const double f = m[r][col] / m[col][col];
      for (std::size_t k = col; k < N; ++k) m[r][k] -= f * m[col][k];
      rhs[r] -= f * rhs[col];
    }
  }
  for (std::size_t i = N; i-- > 0;) {
    double s = rhs[i];
    for (std::size_t k = i + 1; k < N; ++k) s -= m[i][k] * x[k];
    x[i] = s / m[i][i];
  }
  return true;
}

// Least squares of eta on the first `degree + 1` powers of u = y / 255.
template <std::size_t N>
bool fit_polynomial(std::span<const Observation> obs, std::array<double, N>& coef) {
  std::array<std::array<double, N>, N> ata{};
  std::array<double, N> aty{};
  for (const auto& o : obs) {
    const double u = o.y / kYMax;
    std::array<double, N> basis{};
    double p = 1.0;
    for (std::size_t k = 0; k < N; ++k, p *= u) basis[k] = p;  // 1, u, u^2
    for (std::size_t i = 0; i < N; ++i) {
      aty[i] += basis[i] * o.eta;
      for (std::size_t j = 0; j < N; ++j) ata[i][j] += basis[i] * basis[j];
    }
  }
  return solve_pivoting<N>(ata, aty, coef);
}

}  // namespace detail

/// Least-squares quadratic through the observations; requires M > 3.
inline QuadraticFit fit_quadratic(std::span<const Observation> obs) {
  if (obs.size() < kPersonalizationMinObservations) {
    throw PersonalizationUnavailable("personalization needs more than 3 observations, have " +
                                     std::to_string(obs.size()));
  }
  for (const auto& o : obs) validate_observation(o);
  std::set<double> distinct;
  for (const auto& o : obs) distinct.insert(o.y);

  QuadraticFit fit;
  if (distinct.size() >= 3) {
    std::array<double, 3> c{};
    if (detail::fit_polynomial<3>(obs, c)) {
      fit.c = c[0];
      fit.b = c[1] / kYMax;
      fit.a = c[2] / (kYMax * kYMax);
      return fit;
    }
  }
  fit.degenerate = true;
  if (distinct.size() >= 2) {
    std::array<double, 2> c{};
    if (detail::fit_polynomial<2>(obs, c)) {
      fit.c = c[0];
      fit.b = c[1] / kYMax;
      return fit;
    }
  }
  double mean = 0.0;
  for (const auto& o : obs) mean += o.eta;
  fit.c = mean / static_cast<double>(obs.size());
  return fit;
}

inline QuadraticFit fit_quadratic(const ObservationStore& store) { return fit_quadratic(store.items()); }

struct InitialEta {
  double eta = kDefaultInitialEta;
  bool personalized = false;
  double mean_luma = 0.0;
};

/// Fit evaluated at the image's mean luminance and clamped to [0, 1]; the
/// default 0.5 until more than three observations exist.
inline InitialEta initial_eta(double mean_luma, const ObservationStore& store) {
  InitialEta r;
  r.mean_luma = mean_luma;
  if (!store.personalization_active()) return r;
  const double v = fit_quadratic(store)(mean_luma);
  r.eta = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : kDefaultInitialEta;
  r.personalized = true;
  return r;
}

inline InitialEta initial_eta(const LuminanceImage& y, const ObservationStore& store) {
  return initial_eta(mean_luminance(y), store);
}

}  // namespace icenet
