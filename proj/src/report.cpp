#include "cbff/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cbff/common.hpp"

namespace cbff::report {

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out = "method,ratio,iou,oa\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.2f,%.2f\n", r.method.c_str(), r.ratio, r.iou,
                  r.oa);
    out += buf;
  }
  return out;
}

std::string to_table(const std::vector<ResultRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %8s %8s %8s\n", "method", "ratio", "IoU", "OA");
  out += buf;
  out += "-------------------------------------\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %7.0f%% %8.2f %8.2f\n", r.method.c_str(),
                  r.ratio * 100.0, r.iou, r.oa);
    out += buf;
  }
  return out;
}

void write_results(const std::string& out_dir, const std::string& stem,
                   const std::vector<ResultRow>& rows) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  {
    std::ofstream f(fs::path(out_dir) / (stem + ".csv"));
    if (!f) throw IoError("cannot write results csv under " + out_dir);
    f << to_csv(rows);
  }
  {
    std::ofstream f(fs::path(out_dir) / (stem + ".txt"));
    if (!f) throw IoError("cannot write results table under " + out_dir);
    f << to_table(rows);
  }
}

}  // namespace cbff::report
