// Pose errors, Chamfer distance, part accuracy and report emission.
#ifndef EM3RF_METRICS_HPP
#define EM3RF_METRICS_HPP

#include "em3rf/fragments.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace em3rf {

/// Geodesic angle ‖log(gtᵀ pred)‖ in degrees.
double rotation_error_deg(const Rotation<double>& pred, const Rotation<double>& gt);

double translation_error(const Pose& pred, const Pose& gt);

/// Root mean square of the per-pose errors. Throws on empty or mismatched lists.
double rmse_rotation(const std::vector<Pose>& preds, const std::vector<Pose>& gts);
double rmse_translation(const std::vector<Pose>& preds, const std::vector<Pose>& gts);

enum class ChamferVariant { squared, absolute };
ChamferVariant parse_chamfer_variant(const std::string& name);
std::string chamfer_variant_name(ChamferVariant v);

/// Squared (or plain) distance from each query row to its nearest reference row.
std::vector<double> nearest_distances_brute(const Points& query, const Points& reference, bool squared = true);
/// Same values through a uniform grid over the reference cloud.
std::vector<double> nearest_distances_grid(const Points& query, const Points& reference, bool squared = true);

/// Largest N·M handled by brute force in chamfer_distance.
inline constexpr double kChamferBruteLimit = 1e6;

/// mean_a min_b d(a, b) + mean_b min_a d(a, b) with d the squared (default) or plain distance.
/// Throws std::invalid_argument on an empty cloud.
double chamfer_distance(const Points& a, const Points& b, ChamferVariant variant = ChamferVariant::squared);
double chamfer_brute(const Points& a, const Points& b, ChamferVariant variant = ChamferVariant::squared);
double chamfer_accelerated(const Points& a, const Points& b, ChamferVariant variant = ChamferVariant::squared);

/// Percentage of entries strictly below `threshold`.
double part_accuracy(const std::vector<double>& per_fragment_cd, double threshold);

struct MetricsConfig {
  double pa_threshold = 0.01;
  ChamferVariant chamfer = ChamferVariant::squared;
};

struct FragmentError {
  double rot_err_deg = 0;
  double trans_err = 0;
  double cd = 0;
  double scale = 1;
};

struct AssemblyReport {
  std::string name;
  double rmse_rot_deg = 0;
  double rmse_trans = 0;
  /// Translation RMSE after multiplying each error by its fragment's scale.
  double rmse_trans_mm = 0;
  double pa_pct = 0;
  double chamfer = 0;
  std::vector<FragmentError> per_fragment;
};

/// Compares fragments placed by `pred` with their ground-truth placement.
AssemblyReport evaluate_assembly(const UnassembledObject& obj, const std::vector<Pose>& pred, const MetricsConfig& cfg,
                                 const std::string& name = "");

/// Pools the per-fragment errors of all reports; the chamfer entry is the mean over objects.
AssemblyReport summarize(const std::vector<AssemblyReport>& reports, const MetricsConfig& cfg,
                         const std::string& name = "summary");

/// Rows: object, rmse_rot_deg, rmse_trans, pa_pct, chamfer, rmse_trans_mm; the summary row last.
void write_report_csv(const std::filesystem::path& path, const std::vector<AssemblyReport>& reports,
                      const AssemblyReport& summary);
void write_report_json(const std::filesystem::path& path, const std::vector<AssemblyReport>& reports,
                       const AssemblyReport& summary, const MetricsConfig& cfg);

}  // namespace em3rf

#endif  // EM3RF_METRICS_HPP
