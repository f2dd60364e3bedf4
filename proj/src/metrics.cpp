#include "em3rf/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace em3rf {

double rotation_error_deg(const Rotation<double>& pred, const Rotation<double>& gt) {
  return so3_log(gt.inverse() * pred).norm() * 180.0 / std::numbers::pi;
}

double translation_error(const Pose& pred, const Pose& gt) { return (pred.translation - gt.translation).norm(); }

namespace {

template <typename F>
double rms(const std::vector<Pose>& preds, const std::vector<Pose>& gts, F err) {
  if (preds.size() != gts.size()) throw std::invalid_argument("rmse: length mismatch");
  if (preds.empty()) throw std::invalid_argument("rmse: empty input");
  double sq = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = err(preds[i], gts[i]);
    sq += e * e;
  }
  return std::sqrt(sq / double(preds.size()));
}

void require_points(const Points& a, const Points& b) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer_distance: empty point cloud");
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

// Uniform bucket grid over the reference points.
class BucketGrid {
 public:
  explicit BucketGrid(const Points& ref) : ref_(ref) {
    lo_ = ref.colwise().minCoeff().transpose();
    const Vector3<double> extent = ref.colwise().maxCoeff().transpose() - lo_;
    // About two points per occupied cell for a surface-like cloud.
    const double volume = std::max(extent.prod(), 1e-30);
    h_ = std::cbrt(volume / std::max<double>(double(ref.rows()) / 2, 1.0));
    const double max_extent = extent.maxCoeff();
    h_ = std::max(h_, max_extent / 256);
    if (!(h_ > 0)) h_ = 1;
    for (int k = 0; k < 3; ++k) dims_[k] = std::max<long>(1, long(std::floor(extent[k] / h_)) + 1);
    const std::size_t cells = std::size_t(dims_[0] * dims_[1] * dims_[2]);
    start_.assign(cells + 1, 0);
    std::vector<std::size_t> cell_of(std::size_t(ref.rows()));
    for (Eigen::Index i = 0; i < ref.rows(); ++i) {
      const auto c = cell(ref.row(i).transpose());
      cell_of[std::size_t(i)] = flat(clamp(c));
      ++start_[cell_of[std::size_t(i)] + 1];
    }
    for (std::size_t c = 0; c < cells; ++c) start_[c + 1] += start_[c];
    order_.resize(std::size_t(ref.rows()));
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (Eigen::Index i = 0; i < ref.rows(); ++i) order_[fill[cell_of[std::size_t(i)]]++] = i;
  }

  double nearest_squared(const Vector3<double>& q) const {
    const auto c = cell(q);
    long r0 = 0;
    for (int k = 0; k < 3; ++k) r0 = std::max({r0, -c[k], c[k] - (dims_[k] - 1)});
    const long r_max = r0 + std::max({dims_[0], dims_[1], dims_[2]});
    double best = std::numeric_limits<double>::infinity();
    for (long r = r0; r <= r_max; ++r) {
      for (long i = std::max(c[0] - r, 0L); i <= std::min(c[0] + r, dims_[0] - 1); ++i)
        for (long j = std::max(c[1] - r, 0L); j <= std::min(c[1] + r, dims_[1] - 1); ++j)
          for (long k = std::max(c[2] - r, 0L); k <= std::min(c[2] + r, dims_[2] - 1); ++k) {
            if (std::max({std::labs(i - c[0]), std::labs(j - c[1]), std::labs(k - c[2])}) != r) continue;
            const std::size_t f = flat({i, j, k});
            for (std::size_t p = start_[f]; p < start_[f + 1]; ++p) {
              const double d = (ref_.row(order_[p]).transpose() - q).squaredNorm();
              best = std::min(best, d);
            }
          }
      // Distance from q to the outside of the searched block of cells.
      double bound = std::numeric_limits<double>::infinity();
      for (int k = 0; k < 3; ++k) {
        const double lo = lo_[k] + double(c[k] - r) * h_, hi = lo_[k] + double(c[k] + r + 1) * h_;
        bound = std::min({bound, q[k] - lo, hi - q[k]});
      }
      if (bound > 0 && best <= bound * bound) break;
    }
    return best;
  }

 private:
  std::array<long, 3> cell(const Vector3<double>& p) const {
    std::array<long, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = long(std::floor((p[k] - lo_[k]) / h_));
    return c;
  }
  std::array<long, 3> clamp(std::array<long, 3> c) const {
    for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k], 0L, dims_[k] - 1);
    return c;
  }
  std::size_t flat(const std::array<long, 3>& c) const {
    return std::size_t((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
  }

  const Points& ref_;
  Vector3<double> lo_;
  double h_ = 1;
  std::array<long, 3> dims_{1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<Eigen::Index> order_;
};

double chamfer_from(const std::vector<double>& ab, const std::vector<double>& ba) { return mean(ab) + mean(ba); }

}  // namespace

double rmse_rotation(const std::vector<Pose>& preds, const std::vector<Pose>& gts) {
  return rms(preds, gts, [](const Pose& p, const Pose& g) { return rotation_error_deg(p.rotation, g.rotation); });
}

double rmse_translation(const std::vector<Pose>& preds, const std::vector<Pose>& gts) {
  return rms(preds, gts, translation_error);
}

ChamferVariant parse_chamfer_variant(const std::string& name) {
  if (name == "squared") return ChamferVariant::squared;
  if (name == "absolute") return ChamferVariant::absolute;
  throw std::invalid_argument("unknown chamfer variant '" + name + "' (expected squared or absolute)");
}

std::string chamfer_variant_name(ChamferVariant v) { return v == ChamferVariant::absolute ? "absolute" : "squared"; }

std::vector<double> nearest_distances_brute(const Points& query, const Points& reference, bool squared) {
  require_points(query, reference);
  std::vector<double> out(std::size_t(query.rows()));
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < reference.rows(); ++j)
      best = std::min(best, (reference.row(j) - query.row(i)).squaredNorm());
    out[std::size_t(i)] = squared ? best : std::sqrt(best);
  }
  return out;
}

std::vector<double> nearest_distances_grid(const Points& query, const Points& reference, bool squared) {
  require_points(query, reference);
  const BucketGrid grid(reference);
  std::vector<double> out(std::size_t(query.rows()));
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    const double best = grid.nearest_squared(query.row(i).transpose());
    out[std::size_t(i)] = squared ? best : std::sqrt(best);
  }
  return out;
}

double chamfer_brute(const Points& a, const Points& b, ChamferVariant variant) {
  const bool sq = variant == ChamferVariant::squared;
  return chamfer_from(nearest_distances_brute(a, b, sq), nearest_distances_brute(b, a, sq));
}

double chamfer_accelerated(const Points& a, const Points& b, ChamferVariant variant) {
  const bool sq = variant == ChamferVariant::squared;
  return chamfer_from(nearest_distances_grid(a, b, sq), nearest_distances_grid(b, a, sq));
}

double chamfer_distance(const Points& a, const Points& b, ChamferVariant variant) {
  require_points(a, b);
  if (double(a.rows()) * double(b.rows()) <= kChamferBruteLimit) return chamfer_brute(a, b, variant);
  return chamfer_accelerated(a, b, variant);
}

double part_accuracy(const std::vector<double>& per_fragment_cd, double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("part_accuracy: threshold must be positive");
  if (per_fragment_cd.empty()) return 0;
  const auto hits = std::count_if(per_fragment_cd.begin(), per_fragment_cd.end(), [&](double cd) { return cd < threshold; });
  return 100.0 * double(hits) / double(per_fragment_cd.size());
}

// ---------------------------------------------------------------------------

AssemblyReport evaluate_assembly(const UnassembledObject& obj, const std::vector<Pose>& pred, const MetricsConfig& cfg,
                                 const std::string& name) {
  if (!obj.gt_poses) throw DataError("evaluate: object has no ground-truth poses");
  const auto& gt = *obj.gt_poses;
  if (pred.size() != gt.size() || gt.size() != obj.size()) throw std::invalid_argument("evaluate: pose count mismatch");
  AssemblyReport r;
  r.name = name;
  std::vector<Points> placed_pred, placed_gt;
  Eigen::Index total = 0;
  double sq_scaled = 0;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    placed_pred.push_back(transform_points(pred[i], obj.fragments[i].positions));
    placed_gt.push_back(transform_points(gt[i], obj.fragments[i].positions));
    total += obj.fragments[i].size();
    FragmentError e;
    e.rot_err_deg = rotation_error_deg(pred[i].rotation, gt[i].rotation);
    e.trans_err = translation_error(pred[i], gt[i]);
    e.cd = chamfer_distance(placed_pred.back(), placed_gt.back(), cfg.chamfer);
    e.scale = obj.fragments[i].scale;
    sq_scaled += std::pow(e.trans_err * e.scale, 2);
    r.per_fragment.push_back(e);
  }
  r.rmse_rot_deg = rmse_rotation(pred, gt);
  r.rmse_trans = rmse_translation(pred, gt);
  r.rmse_trans_mm = std::sqrt(sq_scaled / double(obj.size()));
  std::vector<double> cds;
  for (const auto& e : r.per_fragment) cds.push_back(e.cd);
  r.pa_pct = part_accuracy(cds, cfg.pa_threshold);

  Points all_pred(total, 3), all_gt(total, 3);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    all_pred.middleRows(row, placed_pred[i].rows()) = placed_pred[i];
    all_gt.middleRows(row, placed_gt[i].rows()) = placed_gt[i];
    row += placed_pred[i].rows();
  }
  r.chamfer = chamfer_distance(all_pred, all_gt, cfg.chamfer);
  return r;
}

AssemblyReport summarize(const std::vector<AssemblyReport>& reports, const MetricsConfig& cfg, const std::string& name) {
  AssemblyReport s;
  s.name = name;
  if (reports.empty()) return s;
  double rot = 0, trans = 0, mm = 0, cd = 0;
  std::vector<double> cds;
  for (const auto& r : reports) {
    for (const auto& e : r.per_fragment) {
      rot += e.rot_err_deg * e.rot_err_deg;
      trans += e.trans_err * e.trans_err;
      mm += std::pow(e.trans_err * e.scale, 2);
      cds.push_back(e.cd);
      s.per_fragment.push_back(e);
    }
    cd += r.chamfer;
  }
  const double n = double(std::max<std::size_t>(cds.size(), 1));
  s.rmse_rot_deg = std::sqrt(rot / n);
  s.rmse_trans = std::sqrt(trans / n);
  s.rmse_trans_mm = std::sqrt(mm / n);
  s.pa_pct = part_accuracy(cds, cfg.pa_threshold);
  s.chamfer = cd / double(reports.size());
  return s;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<AssemblyReport>& reports,
                      const AssemblyReport& summary) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report " + path.string());
  os.precision(10);
  os << "object,rmse_rot_deg,rmse_trans,pa_pct,chamfer,rmse_trans_mm\n";
  auto row = [&](const AssemblyReport& r) {
    os << r.name << ',' << r.rmse_rot_deg << ',' << r.rmse_trans << ',' << r.pa_pct << ',' << r.chamfer << ','
       << r.rmse_trans_mm << '\n';
  };
  for (const auto& r : reports) row(r);
  row(summary);
}

void write_report_json(const std::filesystem::path& path, const std::vector<AssemblyReport>& reports,
                       const AssemblyReport& summary, const MetricsConfig& cfg) {
  auto to_json = [](const AssemblyReport& r) {
    nlohmann::json j{{"object", r.name},         {"rmse_rot_deg", r.rmse_rot_deg}, {"rmse_trans", r.rmse_trans},
                     {"rmse_trans_mm", r.rmse_trans_mm}, {"pa_pct", r.pa_pct},     {"chamfer", r.chamfer}};
    j["per_fragment"] = nlohmann::json::array();
    for (const auto& e : r.per_fragment)
      j["per_fragment"].push_back({{"rot_err_deg", e.rot_err_deg}, {"trans_err", e.trans_err}, {"cd", e.cd}});
    return j;
  };
  nlohmann::json doc;
  doc["pa_threshold"] = cfg.pa_threshold;
  doc["chamfer_variant"] = chamfer_variant_name(cfg.chamfer);
  doc["objects"] = nlohmann::json::array();
  for (const auto& r : reports) doc["objects"].push_back(to_json(r));
  doc["summary"] = to_json(summary);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report " + path.string());
  os << doc.dump(2) << '\n';
}

}  // namespace em3rf
