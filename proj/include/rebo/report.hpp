// Plot-ready summaries of a ledger snapshot: per-cohort weight histograms
// over ten right-closed bins of (0,1] and per-cohort means.
#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "rebo/metrics.hpp"
#include "rebo/regularizers.hpp"
#include "rebo/sample.hpp"

namespace rebo {

// Right-closed bins (0.0,0.1], ..., (0.9,1.0]; exact zeros land in the
// first bin. The 1e-9 slack keeps decimal boundaries like 0.2 in their
// decimal bin despite binary rounding.
inline int histogram_bin(double w) {
  if (w <= 0.0) return 0;
  const int bin = static_cast<int>(std::ceil(w * 10.0 - 1e-9)) - 1;
  return std::min(std::max(bin, 0), 9);
}

struct CohortHistogram {
  std::size_t counts[10] = {0};
  std::size_t total = 0;
  double mean = 0.0;

  double percent(int bin) const {
    return total == 0
               ? 0.0
               : 100.0 * static_cast<double>(counts[bin]) /
                     static_cast<double>(total);
  }
};

inline std::map<Cohort, CohortHistogram> weight_histograms(
    const WeightLedger& ledger) {
  if (ledger.size() == 0) {
    throw std::invalid_argument("weight_histograms: empty ledger");
  }
  std::map<Cohort, CohortHistogram> out;
  for (const auto& [id, entry] : ledger.entries()) {
    CohortHistogram& h = out[entry.cohort];
    h.counts[histogram_bin(entry.weight)] += 1;
    h.total += 1;
    h.mean += entry.weight;
  }
  for (auto& [cohort, h] : out) h.mean /= static_cast<double>(h.total);
  return out;
}

inline void write_histogram_csv(std::ostream& os,
                                const std::map<Cohort, CohortHistogram>& hists) {
  os << "cohort,bin_low,bin_high,count,percent\n";
  char low[8], high[8];
  for (const auto& [cohort, h] : hists) {
    for (int b = 0; b < 10; ++b) {
      std::snprintf(low, sizeof(low), "%.1f", b / 10.0);
      std::snprintf(high, sizeof(high), "%.1f", (b + 1) / 10.0);
      os << cohort_letter(cohort) << ',' << low << ',' << high << ','
         << h.counts[b] << ',' << format_double(h.percent(b)) << '\n';
    }
  }
}

inline void write_cohort_means_csv(
    std::ostream& os, const std::map<Cohort, CohortHistogram>& hists) {
  os << "cohort,mean_weight,count\n";
  for (const auto& [cohort, h] : hists) {
    os << cohort_letter(cohort) << ',' << format_double(h.mean) << ','
       << h.total << '\n';
  }
}

}  // namespace rebo
