// Per-iteration metrics records and their CSV form. Values print with
// %.17g so identical runs produce byte-identical files.
#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace rebo {

struct MetricsRecord {
  long epoch = 0;      // global epoch (warm-up epochs first)
  long iteration = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double accuracy = std::nan("");  // blank unless evaluated this row
  double mean_w_u = std::nan("");
  double mean_w_w = std::nan("");
  double mean_w_s = std::nan("");
  double mean_w_o = std::nan("");
  double hvp_norm = 0.0;
  double temporal_norm = 0.0;
  double entropy_norm = 0.0;
  double od_norm = 0.0;
  double epsilon = 0.0;
  double xi = 0.0;
};

inline const char* metrics_csv_header() {
  return "epoch,iteration,train_loss,val_loss,accuracy,mean_w_U,mean_w_W,"
         "mean_w_S,mean_w_O,hvp_norm,temporal_norm,entropy_norm,od_norm,"
         "epsilon,xi";
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
  std::string out;
  out += std::to_string(r.epoch);
  out += ',';
  out += std::to_string(r.iteration);
  for (double v : {r.train_loss, r.val_loss, r.accuracy, r.mean_w_u,
                   r.mean_w_w, r.mean_w_s, r.mean_w_o, r.hvp_norm,
                   r.temporal_norm, r.entropy_norm, r.od_norm, r.epsilon,
                   r.xi}) {
    out += ',';
    out += format_double(v);
  }
  return out;
}

inline void write_metrics_csv(std::ostream& os,
                              const std::vector<MetricsRecord>& rows) {
  os << metrics_csv_header() << '\n';
  for (const MetricsRecord& r : rows) os << metrics_csv_row(r) << '\n';
}

}  // namespace rebo
