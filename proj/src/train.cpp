#include "em3rf/train.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace em3rf {

namespace ts = tensor;
using ts::Index;
using T = ts::Tensor<double>;

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

T constant(const ts::Shape& shape, std::vector<double> v) { return T::from_data(shape, std::move(v)); }

T points_tensor(const Points& p) {
  std::vector<double> v(static_cast<std::size_t>(p.size()));
  for (Index i = 0; i < p.rows(); ++i)
    for (int k = 0; k < 3; ++k) v[static_cast<std::size_t>(i * 3 + k)] = p(i, k);
  return constant({p.rows(), 3}, std::move(v));
}

Fragment rotated(const Fragment& f, const Rotation<double>& r) {
  Fragment out = f;
  const Matrix3<double> m = r.matrix();
  out.positions = f.positions * m.transpose();
  out.normals = f.normals * m.transpose();
  return out;
}

std::vector<Index> random_subset(Index n, Index k, std::mt19937_64& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index(0));
  if (k >= n) return idx;
  for (Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : encoder(config.encoder, encoder_store, seed),
      net(config.flow, config.encoder, flow_store, seed ^ 0x9e3779b97f4a7c15ULL),
      config_(config) {}

std::vector<ts::NamedArray> Model::export_parameters() const {
  auto out = ts::export_store(encoder_store);
  auto flow = ts::export_store(flow_store);
  out.insert(out.end(), flow.begin(), flow.end());
  return out;
}

std::size_t Model::import_parameters(const std::vector<ts::NamedArray>& entries) {
  return ts::import_store(encoder_store, entries) + ts::import_store(flow_store, entries);
}

void Model::save(const std::filesystem::path& path) const { ts::write_checkpoint(path, export_parameters()); }

std::size_t Model::load(const std::filesystem::path& path) { return import_parameters(ts::read_checkpoint(path)); }

double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        rank_sum += mid_rank;
        ++positives;
      }
    i = j;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("roc_auc: needs both classes");
  return (rank_sum - double(positives) * double(positives + 1) / 2) / (double(positives) * double(negatives));
}

// ---------------------------------------------------------------------------

double segmentation_auc(const FragmentEncoder<double>& encoder, const std::vector<UnassembledObject>& objects,
                        Index points, std::uint64_t seed) {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& obj : objects)
    for (std::size_t i = 0; i < obj.size(); ++i) {
      const Fragment& f = obj.fragments[i];
      if (!f.boundary_label) throw DataError("segmentation: fragment without boundary labels");
      const Fragment s = sample_points(f, std::min(points, f.size()), seed + i);
      const T p = encoder.segment_boundary(encoder.encode(s));
      scores.insert(scores.end(), p.values().begin(), p.values().end());
      labels.insert(labels.end(), s.boundary_label->begin(), s.boundary_label->end());
    }
  return roc_auc(scores, labels);
}

std::vector<SegEpoch> pretrain_segmentation(Model& model, const std::vector<UnassembledObject>& train,
                                            const std::vector<UnassembledObject>& eval, const SegPretrainConfig& cfg,
                                            const std::function<void(const SegEpoch&)>& on_epoch) {
  std::vector<const Fragment*> pool;
  for (const auto& obj : train)
    for (const auto& f : obj.fragments) {
      if (!f.boundary_label) throw DataError("pretrain-seg: fragment without boundary labels");
      pool.push_back(&f);
    }
  if (pool.empty()) throw DataError("pretrain-seg: empty training set");
  const auto& eval_set = eval.empty() ? train : eval;

  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  ts::Adam<double> opt(model.encoder_store, ts::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<SegEpoch> trace;
  auto report = [&](SegEpoch e) {
    e.auc = segmentation_auc(model.encoder, eval_set, cfg.eval_points, cfg.seed);
    e.wall_ms = elapsed_ms(start);
    trace.push_back(e);
    if (on_epoch) on_epoch(e);
  };
  report({0, std::nan(""), 0, 0});

  const int batch = std::max(1, cfg.batch);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int updates = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(batch)) {
      opt.zero_grad();
      std::vector<T> losses;
      for (std::size_t k = b0; k < std::min(order.size(), b0 + std::size_t(batch)); ++k) {
        const Fragment& f = *pool[order[k]];
        const Fragment s = rotated(f.subset(random_subset(f.size(), cfg.points, rng)),
                                   sample_uniform_rotation<double>(rng));
        const auto& lab = *s.boundary_label;
        const double pos = double(std::count(lab.begin(), lab.end(), std::uint8_t(1)));
        const double n = double(lab.size());
        std::vector<double> targets(lab.size()), weights(lab.size());
        for (std::size_t i = 0; i < lab.size(); ++i) {
          targets[i] = lab[i];
          weights[i] = lab[i] ? n / (2 * std::max(pos, 1.0)) : n / (2 * std::max(n - pos, 1.0));
        }
        losses.push_back(ts::bce_with_logits(model.encoder.segment_logits(model.encoder.encode(s)), targets, weights));
      }
      T loss = losses[0];
      for (std::size_t k = 1; k < losses.size(); ++k) loss = ts::add(loss, losses[k]);
      loss = ts::scale(loss, 1.0 / double(losses.size()));
      if (!std::isfinite(loss.item()))
        throw DivergenceError("pretrain-seg: non-finite loss at epoch " + std::to_string(epoch));
      ts::backward(loss);
      ts::clip_grad_norm(model.encoder_store, cfg.clip);
      opt.step();
      loss_sum += loss.item();
      ++updates;
    }
    report({epoch, loss_sum / std::max(updates, 1), 0, 0});
  }
  return trace;
}

// ---------------------------------------------------------------------------

TrainingView prepare_view(const Model& model, const UnassembledObject& obj, Index encoder_points,
                          Index overlap_points, std::uint64_t seed, bool color_augment) {
  if (!obj.gt_poses) throw DataError("training object without ground-truth poses");
  std::mt19937_64 rng(seed);
  std::vector<Rotation<double>> rots;
  for (std::size_t i = 0; i < obj.size(); ++i) rots.push_back(sample_uniform_rotation<double>(rng));
  const UnassembledObject view = rotate_fragments(obj, rots);
  const bool enrich = model.config().flow.arch == VelocityArch::flat;

  std::vector<Fragment> sampled;
  for (std::size_t i = 0; i < view.size(); ++i)
    sampled.push_back(sample_points(view.fragments[i], std::min(encoder_points, view.fragments[i].size()), seed + i));
  if (color_augment) {
    std::array<int, 3> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::bernoulli_distribution flip(0.5);
    const std::array<bool, 3> invert{flip(rng), flip(rng), flip(rng)};
    for (Fragment& f : sampled) {
      const Points c = f.colors;
      for (int k = 0; k < 3; ++k) {
        if (invert[k])
          f.colors.col(k) = 1.0 - c.col(perm[k]).array();
        else
          f.colors.col(k) = c.col(perm[k]);
      }
    }
  }

  TrainingView out;
  out.anchor = select_anchor(view.fragments);
  out.targets = relative_to_anchor(*view.gt_poses, out.anchor);
  for (std::size_t i = 0; i < view.size(); ++i) {
    const Fragment& f = view.fragments[i];
    out.features.push_back(extract_features(model.encoder, sampled[i], enrich));
    out.overlap_points.push_back(sample_points(f, std::min(overlap_points, f.size()), seed + 101 * (i + 1)).positions);
  }
  return out;
}

std::vector<PreparedObject> prepare_dataset(const Model& model, const std::vector<UnassembledObject>& objects,
                                            const FlowTrainConfig& cfg) {
  std::vector<PreparedObject> out(objects.size());
  parallel_for(objects.size(), cfg.jobs, [&](std::size_t k) {
    for (int v = 0; v < std::max(cfg.views, 1); ++v)
      out[k].views.push_back(prepare_view(model, objects[k], cfg.encoder_points, cfg.overlap_points,
                                          cfg.seed * 1000003 + k * 7919 + std::uint64_t(v), cfg.color_augment && v > 0));
  });
  return out;
}

FlowLogWriter::FlowLogWriter(const std::filesystem::path& path) : path_(path) {
  std::ofstream os(path_, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write training log " + path_.string());
  os << "step,L_flow,L_overlap,L_total,wall_ms\n";
}

void FlowLogWriter::write(const FlowLogRow& row) {
  std::ofstream os(path_, std::ios::app);
  os.precision(10);
  os << row.step << ',' << row.flow << ',' << row.overlap << ',' << row.total << ',' << row.wall_ms << '\n';
}

T extrapolated_points(const T& velocity_row, const Pose& gt, double t, const Points& body_points) {
  const T v = ts::reshape(velocity_row, {6});
  const T rot = ts::scale(ts::reshape(ts::slice(v, 0, 0, 3), {1, 3}), 1.0 - t);
  const T beta = ts::add(constant({3}, {gt.translation[0], gt.translation[1], gt.translation[2]}),
                         ts::scale(ts::slice(v, 0, 3, 3), 1.0 - t));
  const T e = ts::reshape(so3_exp_rows(rot), {3, 3});
  std::vector<double> rt(9);
  const Matrix3<double> r = gt.rotation.matrix();
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) rt[a * 3 + b] = r(b, a);
  // Rows p (Rᵗ E)ᵀ = p Eᵀ Rᵗᵀ.
  const T local = ts::matmul_bt(points_tensor(body_points), e);
  return ts::add_rowwise(ts::matmul(local, constant({3, 3}, rt)), beta);
}

std::vector<FlowLogRow> train_flow(Model& model, const std::vector<PreparedObject>& data, const FlowTrainConfig& cfg,
                                   const std::function<void(const FlowLogRow&)>& on_log) {
  if (data.empty()) throw DataError("train: empty training set");
  for (const auto& d : data)
    if (d.views.empty()) throw DataError("train: object without prepared views");
  const FlowConfig& fc = model.config().flow;
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_obj(0, data.size() - 1);
  std::uniform_real_distribution<double> pick_t(0.0, fc.t_cap);
  ts::Adam<double> opt(model.flow_store, ts::AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});

  std::vector<FlowLogRow> trace;
  const int batch = std::max(1, cfg.batch);
  for (long step = 0; step < cfg.steps; ++step) {
    const double progress = cfg.steps > 1 ? double(step) / double(cfg.steps - 1) : 0.0;
    opt.config().lr = cfg.lr * (cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + std::cos(M_PI * progress)));
    opt.zero_grad();
    T flow_total = T::scalar(0.0), overlap_total = T::scalar(0.0);
    for (int b = 0; b < batch; ++b) {
      const auto& obj = data[pick_obj(rng)];
      std::uniform_int_distribution<std::size_t> pick_view(0, obj.views.size() - 1);
      const TrainingView& view = obj.views[pick_view(rng)];
      const std::size_t m = view.features.size();
      const double t = pick_t(rng);
      const auto g0 = initial_poses(m, StartMode::sample_p0, view.anchor, rng);
      std::vector<Pose> gt(m);
      std::vector<Tangent> target(m);
      std::vector<const FragmentFeatures<double>*> feats;
      for (std::size_t i = 0; i < m; ++i) {
        const FlowSample s = make_flow_sample(g0[i], view.targets[i], t);
        gt[i] = s.gt;
        target[i] = s.target;
        feats.push_back(&view.features[i]);
      }
      const T pred = model.net.forward(feats, gt, t, view.anchor);
      const double w = std::pow(1.0 - t, 0.5 * cfg.time_weight_power);
      flow_total = ts::add(flow_total, flow_loss(ts::scale(pred, w), ts::scale(tangent_rows<double>(target), w), fc.lambda));
      if (cfg.alpha > 0 && m >= 2) {
        std::vector<T> world;
        for (std::size_t i = 0; i < m; ++i)
          world.push_back(extrapolated_points(ts::slice(pred, 0, Index(i), 1), gt[i], t, view.overlap_points[i]));
        overlap_total = ts::add(overlap_total, no_overlap_loss(world, cfg.overlap));
      }
    }
    const T flow_mean = ts::scale(flow_total, 1.0 / batch);
    const T overlap_mean = ts::scale(overlap_total, 1.0 / batch);
    const T loss = cfg.alpha > 0 ? ts::add(flow_mean, ts::scale(overlap_mean, cfg.alpha)) : flow_mean;
    if (!std::isfinite(loss.item())) {
      std::ostringstream msg;
      msg << "train: non-finite loss at step " << step << " (L_flow " << flow_mean.item() << ", L_overlap "
          << overlap_mean.item() << ")";
      throw DivergenceError(msg.str());
    }
    ts::backward(loss);
    const double norm = ts::clip_grad_norm(model.flow_store, cfg.clip);
    if (!std::isfinite(norm))
      throw DivergenceError("train: non-finite gradient norm at step " + std::to_string(step));
    opt.step();

    if (step % std::max(cfg.log_every, 1) == 0 || step + 1 == cfg.steps) {
      const FlowLogRow row{step, flow_mean.item(), overlap_mean.item(), loss.item(), elapsed_ms(start)};
      trace.push_back(row);
      if (on_log) on_log(row);
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------

Assembly assemble(const Model& model, const UnassembledObject& obj, const AssembleOptions& options) {
  if (obj.fragments.empty()) throw DataError("assemble: object has no fragments");
  const bool enrich = model.config().flow.arch == VelocityArch::flat;
  Assembly out;
  out.anchor = select_anchor(obj.fragments);
  std::vector<FragmentFeatures<double>> features;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    const Fragment& f = obj.fragments[i];
    features.push_back(extract_features(model.encoder, sample_points(f, std::min(options.encoder_points, f.size()), options.seed + i), enrich));
  }
  std::vector<const FragmentFeatures<double>*> ptrs;
  for (const auto& f : features) ptrs.push_back(&f);

  std::mt19937_64 rng(options.seed);
  const auto start = initial_poses(obj.size(), options.mode, out.anchor, rng);
  IntegrateOptions io;
  io.steps = options.steps;
  io.frozen = out.anchor;
  const std::size_t anchor = out.anchor;
  out.poses = integrate(
      [&](const std::vector<Pose>& poses, double t) { return predict_velocity(model.net, poses, t, ptrs, anchor); },
      start, io);
  return out;
}

std::vector<Pose> align_to_ground_truth(const Assembly& assembly, const std::vector<Pose>& gt_poses) {
  if (gt_poses.size() != assembly.poses.size()) throw std::invalid_argument("align_to_ground_truth: size mismatch");
  std::vector<Pose> out;
  for (const auto& p : assembly.poses) out.push_back(gt_poses[assembly.anchor] * p);
  return out;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::size_t(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace em3rf
