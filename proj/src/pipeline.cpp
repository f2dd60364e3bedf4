#include "em3rf/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace em3rf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string object_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "obj_%04zu", k);
  return buf;
}

void save_resolved_config(const Config& cfg, const std::string& command) {
  fs::create_directories(cfg.workdir);
  std::ofstream os(cfg.workdir / (command + "_config.json"), std::ios::trunc);
  os << config_to_json(cfg).dump(2) << "\n";
}

std::vector<UnassembledObject> read_all(const std::vector<fs::path>& manifests, int jobs) {
  std::vector<UnassembledObject> out(manifests.size());
  parallel_for(manifests.size(), jobs, [&](std::size_t k) { out[k] = read_object(manifests[k]); });
  return out;
}

json pose_to_json(const Pose& g) {
  const Matrix3<double> r = g.rotation.matrix();
  json rows = json::array();
  for (int i = 0; i < 3; ++i) rows.push_back({r(i, 0), r(i, 1), r(i, 2)});
  return {{"rotation", rows}, {"translation", {g.translation.x(), g.translation.y(), g.translation.z()}}};
}

double mean_pairwise_iou(const UnassembledObject& obj, const std::vector<Pose>& poses, const OverlapConfig& ov) {
  std::vector<Points> placed;
  for (std::size_t i = 0; i < obj.size(); ++i) placed.push_back(transform_points(poses[i], obj.fragments[i].positions));
  const auto iou = pairwise_iou(placed, ov);
  double sum = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < iou.size(); ++i)
    for (std::size_t j = i + 1; j < iou.size(); ++j, ++pairs) sum += iou[i][j];
  return pairs ? sum / pairs : 0.0;
}

}  // namespace

std::uint64_t object_seed(std::uint64_t seed, std::size_t k) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(k)};
  std::uint32_t v[2];
  seq.generate(v, v + 2);
  return (std::uint64_t(v[0]) << 32) | v[1];
}

UnassembledObject make_object(const DatasetConfig& spec, std::uint64_t seed, std::size_t k) {
  FractureSpec fs;
  fs.shape = parse_shape(spec.shapes[k % spec.shapes.size()]);
  fs.fragments = spec.fragments;
  fs.points = spec.points;
  fs.scale = spec.scale;
  const std::uint64_t s = object_seed(seed, k);
  UnassembledObject obj = generate_fracture(fs, s);
  const auto labels = label_fracture_boundary(obj, spec.tau);
  for (std::size_t i = 0; i < obj.size(); ++i) obj.fragments[i].boundary_label = labels[i];
  std::mt19937_64 rng(s ^ 0x5bd1e995ULL);
  return perturb(obj, rng);
}

std::vector<fs::path> cmd_generate(const Config& cfg, std::ostream& log) {
  const auto n = std::size_t(cfg.dataset.objects);
  std::vector<fs::path> out(n);
  std::error_code ec;
  fs::create_directories(cfg.dataset.dir, ec);
  if (ec) throw DataError("cannot create dataset directory " + cfg.dataset.dir.string() + ": " + ec.message());
  parallel_for(n, cfg.jobs, [&](std::size_t k) {
    out[k] = write_object(cfg.dataset.dir, object_name(k), make_object(cfg.dataset, cfg.seed, k));
  });
  log << "generated " << n << " objects with " << cfg.dataset.fragments << " fragments each in "
      << cfg.dataset.dir.string() << "\n";
  return out;
}

DatasetSplit load_split(const Config& cfg) {
  if (!fs::is_directory(cfg.dataset.dir)) throw DataError("dataset directory " + cfg.dataset.dir.string() + " not found");
  const auto manifests = list_manifests(cfg.dataset.dir);
  if (manifests.empty()) throw DataError("no manifests in " + cfg.dataset.dir.string());
  const std::size_t hold = std::min<std::size_t>(std::size_t(cfg.dataset.holdout), manifests.size());
  if (hold == manifests.size()) throw DataError("holdout leaves no training objects");
  const std::vector<fs::path> train(manifests.begin(), manifests.end() - long(hold));
  const std::vector<fs::path> test(manifests.end() - long(hold), manifests.end());
  DatasetSplit split;
  split.train = read_all(train, cfg.jobs);
  split.holdout = read_all(test, cfg.jobs);
  for (const auto& p : test) split.holdout_names.push_back(p.stem().string());
  return split;
}

std::vector<SegEpoch> cmd_pretrain_seg(const Config& cfg, std::ostream& log) {
  auto split = load_split(cfg);
  Model model(cfg.model, cfg.seed);
  const fs::path ckpt = cfg.encoder_checkpoint(), log_path = cfg.workdir / "seg_log.csv";
  fs::create_directories(cfg.workdir);
  int offset = 0;
  if (cfg.pretrain_resume && fs::exists(ckpt)) {
    model.import_parameters(tensor::read_checkpoint(ckpt));
    std::ifstream is(log_path);
    std::string line;
    while (std::getline(is, line))
      if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) offset = std::stoi(line);
    log << "resuming from " << ckpt.string() << " after epoch " << offset << "\n";
  } else {
    std::ofstream(log_path, std::ios::trunc) << "epoch,loss,auc,wall_ms\n";
  }
  save_resolved_config(cfg, "pretrain_seg");
  SegPretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed + std::uint64_t(offset);
  auto trace = pretrain_segmentation(model, split.train, split.holdout.empty() ? split.train : split.holdout, pc,
                                     [&](const SegEpoch& e) {
                                       if (offset > 0 && e.epoch == 0) return;
                                       log << "epoch " << e.epoch + offset << " loss " << e.loss << " auc " << e.auc
                                           << "\n";
                                       std::ofstream os(log_path, std::ios::app);
                                       os.precision(10);
                                       os << e.epoch + offset << ',' << e.loss << ',' << e.auc << ',' << e.wall_ms
                                          << '\n';
                                     });
  for (auto& e : trace) e.epoch += offset;
  if (offset > 0 && !trace.empty()) trace.erase(trace.begin());
  tensor::write_checkpoint(ckpt, tensor::export_store(model.encoder_store, "encoder/"));
  log << "wrote " << ckpt.string() << "\n";
  return trace;
}

std::vector<FlowLogRow> cmd_train(const Config& cfg, std::ostream& log) {
  auto split = load_split(cfg);
  Model model(cfg.model, cfg.seed);
  if (fs::exists(cfg.encoder_checkpoint())) {
    const auto n = model.import_parameters(tensor::read_checkpoint(cfg.encoder_checkpoint()));
    log << "loaded " << n << " encoder parameters from " << cfg.encoder_checkpoint().string() << "\n";
  } else {
    log << "no encoder checkpoint at " << cfg.encoder_checkpoint().string() << ", using the initialization\n";
  }
  save_resolved_config(cfg, "train");
  FlowTrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.jobs = cfg.jobs;
  const auto data = prepare_dataset(model, split.train, tc);
  log << "prepared " << data.size() << " objects x " << tc.views << " views\n";
  FlowLogWriter writer(cfg.workdir / "flow_log.csv");
  auto rows = train_flow(model, data, tc, [&](const FlowLogRow& r) {
    writer.write(r);
    if (r.step % (tc.log_every * 10) == 0 || r.step + 1 == tc.steps)
      log << "step " << r.step << " L_flow " << r.flow << " L_overlap " << r.overlap << "\n";
  });
  model.save(cfg.model_checkpoint());
  log << "wrote " << cfg.model_checkpoint().string() << "\n";
  return rows;
}

std::unique_ptr<Model> load_trained_model(const Config& cfg) {
  if (!fs::exists(cfg.model_checkpoint())) throw DataError("model checkpoint " + cfg.model_checkpoint().string() + " not found");
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  const auto entries = tensor::read_checkpoint(cfg.model_checkpoint());
  const std::size_t expected = model->encoder_store.entries().size() + model->flow_store.entries().size();
  if (model->import_parameters(entries) != expected)
    throw DataError("model checkpoint " + cfg.model_checkpoint().string() + " does not match the model config");
  return model;
}

Assembly cmd_assemble(const Config& cfg, const fs::path& manifest, const fs::path& out, std::ostream& log) {
  const auto model = load_trained_model(cfg);
  const auto obj = read_object(manifest);
  AssembleOptions ao;
  ao.steps = cfg.inference.steps;
  ao.mode = cfg.inference.mode;
  ao.encoder_points = cfg.train.encoder_points;
  ao.seed = cfg.seed;
  const Assembly a = assemble(*model, obj, ao);
  fs::create_directories(out);
  const std::string name = manifest.stem().string();
  json doc{{"object", name}, {"anchor", a.anchor}, {"mode", start_mode_name(ao.mode)}, {"poses", json::array()}};
  for (std::size_t i = 0; i < obj.size(); ++i) {
    Fragment placed = obj.fragments[i];
    placed.positions = transform_points(a.poses[i], placed.positions);
    placed.normals = placed.normals * a.poses[i].rotation.matrix().transpose();
    const std::string file = name + "_frag" + std::to_string(i) + ".ply";
    save_ply(out / file, placed);
    json p = pose_to_json(a.poses[i]);
    p["file"] = file;
    doc["poses"].push_back(p);
  }
  std::ofstream(out / (name + "_poses.json"), std::ios::trunc) << doc.dump(2) << "\n";
  log << "assembled " << name << " (" << obj.size() << " fragments, anchor " << a.anchor << ") into "
      << out.string() << "\n";
  return a;
}

EvalResult evaluate_objects(const Model& model, const std::vector<UnassembledObject>& objects,
                            const std::vector<std::string>& names, const Config& cfg) {
  EvalResult r;
  r.reports.resize(objects.size());
  std::vector<double> iou(objects.size(), 0.0);
  parallel_for(objects.size(), cfg.jobs, [&](std::size_t k) {
    const auto& obj = objects[k];
    if (!obj.gt_poses) throw DataError("object " + names[k] + " has no ground-truth poses");
    AssembleOptions ao;
    ao.steps = cfg.inference.steps;
    ao.mode = cfg.inference.mode;
    ao.encoder_points = cfg.train.encoder_points;
    ao.seed = cfg.seed + k;
    const auto pred = align_to_ground_truth(assemble(model, obj, ao), *obj.gt_poses);
    r.reports[k] = evaluate_assembly(obj, pred, cfg.metrics, names[k]);
    iou[k] = mean_pairwise_iou(obj, pred, cfg.train.overlap);
  });
  r.summary = summarize(r.reports, cfg.metrics);
  for (double v : iou) r.mean_iou += v / double(iou.size());
  return r;
}

EvalResult cmd_eval(const Config& cfg, std::ostream& log) {
  const auto model = load_trained_model(cfg);
  const auto split = load_split(cfg);
  if (split.holdout.empty()) throw DataError("no held-out objects to evaluate (dataset.holdout = 0)");
  auto r = evaluate_objects(*model, split.holdout, split.holdout_names, cfg);
  write_report_csv(cfg.workdir / "report.csv", r.reports, r.summary);
  write_report_json(cfg.workdir / "report.json", r.reports, r.summary, cfg.metrics);
  log << "rmse_rot_deg " << r.summary.rmse_rot_deg << " rmse_trans " << r.summary.rmse_trans << " pa_pct "
      << r.summary.pa_pct << " chamfer " << r.summary.chamfer << " mean_iou " << r.mean_iou << "\n";
  return r;
}

CertifyRun cmd_certify(const Config& cfg, const fs::path& checkpoint, const CertifyOptions& options, std::ostream& log) {
  std::vector<tensor::NamedArray> entries;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw DataError("checkpoint " + checkpoint.string() + " not found");
    entries = tensor::read_checkpoint(checkpoint);
  }
  CertifyRun run;
  {
    tensor::ParameterStore<float> store;
    FragmentEncoder<float> enc(cfg.model.encoder, store, cfg.seed);
    if (!entries.empty()) tensor::import_store(store, entries, "encoder/");
    run.float32 = certify_encoder(enc, options);
  }
  {
    tensor::ParameterStore<double> store;
    FragmentEncoder<double> enc(cfg.model.encoder, store, cfg.seed);
    if (!entries.empty()) tensor::import_store(store, entries, "encoder/");
    run.float64 = certify_encoder(enc, options);
  }
  log << "[float32]\n" << run.float32.to_text() << "[float64]\n" << run.float64.to_text();
  return run;
}

}  // namespace em3rf
