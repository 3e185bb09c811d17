#pragma once

#include <string>
#include <vector>

namespace cbff::report {

struct ResultRow {
  std::string method;  // sup_only | cnn | trans | cbff
  double ratio = 0;    // labeled fraction
  double iou = 0;
  double oa = 0;
};

// Published reference results on WHU-CD at the 5% label ratio, kept for
// context next to locally produced tables (not reproducible at desk scale).
inline constexpr double kReferenceWhu5SemiIou = 81.0;
inline constexpr double kReferenceWhu5SupOnlyIou = 52.1;

std::string to_csv(const std::vector<ResultRow>& rows);
std::string to_table(const std::vector<ResultRow>& rows);
void write_results(const std::string& out_dir, const std::string& stem,
                   const std::vector<ResultRow>& rows);

}  // namespace cbff::report
