#pragma once

// File-level workflow shared by the command-line tool and the acceptance
// runs: phantom directories, JSON documents and the full training job.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fodforge/classifier.hpp"
#include "fodforge/error.hpp"
#include "fodforge/phantom.hpp"
#include "fodforge/training.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

/// Parses JSON text; syntax errors become ParseError naming line and column.
inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ParseError(what + ": line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) { return parse_json_text(detail::read_file(path), path); }

// ---------------------------------------------------------------- phantom directories

namespace phantom_files {
inline constexpr const char* kFod = "fod.fodv";
inline constexpr const char* kWmMask = "wm_mask.fodv";
inline constexpr const char* kGmMask = "gm_mask.fodv";
inline constexpr const char* kCounts = "counts.fodv";
inline constexpr const char* kDwi = "dwi.fodv";
inline constexpr const char* kDwiClean = "dwi_clean.fodv";
inline constexpr const char* kBvec = "dwi.bvec";
inline constexpr const char* kBval = "dwi.bval";
inline constexpr const char* kSpec = "spec.json";
inline std::string response(Tissue t) {
  std::string n = tissue_name(t);
  for (char& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return "response_" + n + ".txt";
}
}  // namespace phantom_files

/// Ground truth, masks, noiseless and noisy DWI, scheme and responses.
inline void write_phantom_dir(const std::string& dir, const Phantom& ph) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  const fs::path d(dir);
  const std::vector<ResponseFunction> responses = preset_responses(shell_bvalues(ph.scheme), ph.spec.l_max);
  const ConvolutionOperator op = build_operator(ph.scheme, responses, ph.spec.l_max);
  write_volume((d / phantom_files::kFod).string(), ph.fod);
  write_volume((d / phantom_files::kWmMask).string(), ph.wm_mask);
  write_volume((d / phantom_files::kGmMask).string(), ph.gm_mask);
  write_volume((d / phantom_files::kCounts).string(), ph.counts);
  write_volume((d / phantom_files::kDwiClean).string(), simulate_dwi(ph.fod, op, NoiseModel::None, 0.0, ph.spec.seed));
  write_volume((d / phantom_files::kDwi).string(), simulate_dwi(ph.fod, op, ph.spec.noise, ph.spec.sigma, ph.spec.seed));
  const auto [bvec, bval] = serialize_scheme(ph.scheme);
  detail::write_file((d / phantom_files::kBvec).string(), bvec);
  detail::write_file((d / phantom_files::kBval).string(), bval);
  for (const auto& r : responses) detail::write_file((d / phantom_files::response(r.tissue)).string(), serialize_response(r));
  detail::write_file((d / phantom_files::kSpec).string(), to_json(ph.spec).dump(2) + "\n");
}

/// Scheme recorded in a DWI header.
inline AcquisitionScheme scheme_of(const Volume& dwi) {
  if (!dwi.meta.contains("bvec") || !dwi.meta.contains("bval")) throw ConfigError("DWI header carries no gradient scheme");
  return parse_scheme(dwi.meta.at("bvec").get<std::string>(), dwi.meta.at("bval").get<std::string>());
}

struct PhantomDir {
  std::string path;
  Volume dwi, fod, wm_mask, gm_mask;
  std::vector<ResponseFunction> responses;
  AcquisitionScheme scheme;
};

inline bool is_phantom_dir(const std::filesystem::path& d) {
  return std::filesystem::exists(d / phantom_files::kDwi) && std::filesystem::exists(d / phantom_files::kFod);
}

inline PhantomDir read_phantom_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  PhantomDir p;
  p.path = dir;
  p.dwi = read_volume((d / phantom_files::kDwi).string());
  p.fod = read_volume((d / phantom_files::kFod).string());
  p.wm_mask = read_volume((d / phantom_files::kWmMask).string());
  p.gm_mask = read_volume((d / phantom_files::kGmMask).string());
  expect_kind(p.dwi, VolumeKind::Dwi, dir + "/" + phantom_files::kDwi);
  p.scheme = parse_scheme(detail::read_file((d / phantom_files::kBvec).string()), detail::read_file((d / phantom_files::kBval).string()));
  if (p.scheme.volumes() != p.dwi.channels())
    throw InvalidInput(dir + ": scheme lists " + std::to_string(p.scheme.volumes()) + " volumes, DWI has " +
                       std::to_string(p.dwi.channels()));
  for (Tissue t : {Tissue::WM, Tissue::GM, Tissue::CSF})
    p.responses.push_back(parse_response(detail::read_file((d / phantom_files::response(t)).string()), t));
  return p;
}

/// `dir` itself when it is a phantom directory, else its phantom subdirectories in name order.
inline std::vector<std::string> list_phantom_dirs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  if (is_phantom_dir(dir)) return {dir};
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && is_phantom_dir(e.path())) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("'" + dir + "' holds no phantom directories");
  return out;
}

// ---------------------------------------------------------------- training job

struct TrainJob {
  CascadeConfig cascade = CascadeConfig::desk();
  TrainConfig train = TrainConfig::desk();
  ClassifierDataConfig classifier_data;
  ClassifierTrainConfig classifier;
  int subsample_per_shell = kSubsamplePerShell;  // 0 keeps every volume
  int subsample_b0 = kSubsampleB0;
  int stages = 2;
  std::uint64_t init_seed = 1;
};

inline nlohmann::json to_json(const TrainJob& j) {
  return {{"cascade", to_json(j.cascade)},
          {"train", to_json(j.train)},
          {"classifier",
           {{"samples", j.classifier_data.samples},
            {"noise_copies", j.classifier_data.noise_copies},
            {"noise_sigma", j.classifier_data.noise_sigma},
            {"data_seed", j.classifier_data.seed},
            {"epochs", j.classifier.epochs},
            {"batch", j.classifier.batch},
            {"lr", j.classifier.lr},
            {"seed", j.classifier.seed}}},
          {"subsample", {{"per_shell", j.subsample_per_shell}, {"b0", j.subsample_b0}}},
          {"stages", j.stages},
          {"init_seed", j.init_seed}};
}

/// Reads a job document; every field is optional. "cascade" and "train"
/// accept {"preset": "paper" | "desk"} plus overrides.
inline TrainJob train_job_from_json(const nlohmann::json& j) {
  TrainJob job;
  try {
    if (j.contains("cascade")) job.cascade = cascade_config_from_json(j.at("cascade"), CascadeConfig::desk());
    if (j.contains("train")) job.train = train_config_from_json(j.at("train"), TrainConfig::desk());
    if (j.contains("classifier")) {
      const auto& c = j.at("classifier");
      job.classifier_data.samples = c.value("samples", job.classifier_data.samples);
      job.classifier_data.noise_copies = c.value("noise_copies", job.classifier_data.noise_copies);
      job.classifier_data.noise_sigma = c.value("noise_sigma", job.classifier_data.noise_sigma);
      job.classifier_data.seed = c.value("data_seed", job.classifier_data.seed);
      job.classifier.epochs = c.value("epochs", job.classifier.epochs);
      job.classifier.batch = c.value("batch", job.classifier.batch);
      job.classifier.lr = c.value("lr", job.classifier.lr);
      job.classifier.seed = c.value("seed", job.classifier.seed);
    }
    if (j.contains("subsample")) {
      job.subsample_per_shell = j.at("subsample").value("per_shell", job.subsample_per_shell);
      job.subsample_b0 = j.at("subsample").value("b0", job.subsample_b0);
    }
    job.stages = j.value("stages", job.stages);
    job.init_seed = j.value("init_seed", job.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training job: ") + e.what());
  }
  if (job.stages != 1 && job.stages != 2) throw ConfigError("stages must be 1 or 2");
  if (job.subsample_per_shell < 0 || job.subsample_b0 < 0) throw ConfigError("subsample counts must be non-negative");
  job.cascade.validate();
  job.train.validate();
  return job;
}

/// Training data in the network's acquisition: subsampled subjects and the
/// matching operator and responses.
struct PreparedData {
  AcquisitionScheme scheme;
  std::vector<ResponseFunction> responses;
  ConvolutionOperator op;
  std::vector<TrainingSubject> train;
  TrainingSubject validation;
  double scale = 1.0;
};

/// The last directory is held out for validation when there are several.
inline PreparedData prepare_training_data(const std::vector<PhantomDir>& dirs, const TrainJob& job) {
  if (dirs.empty()) throw ConfigError("no training data");
  const AcquisitionScheme& full = dirs.front().scheme;
  Subsampled sub{full, {}};
  for (int v = 0; v < full.volumes(); ++v) sub.retained.push_back(v);
  if (job.subsample_per_shell > 0) sub = subsample_first_k(full, job.subsample_per_shell, job.subsample_b0);
  PreparedData out;
  out.scheme = sub.scheme;
  // Responses restricted to the retained shells, in shell order.
  const std::vector<double> all_shells = shell_bvalues(full);
  for (const auto& r : dirs.front().responses) {
    ResponseFunction kept{r.tissue, Eigen::MatrixXd(static_cast<Eigen::Index>(shell_bvalues(sub.scheme).size()), r.coeffs.cols())};
    const std::vector<double> want = shell_bvalues(sub.scheme);
    for (std::size_t i = 0; i < want.size(); ++i) {
      const auto it = std::find(all_shells.begin(), all_shells.end(), want[i]);
      if (it == all_shells.end()) throw ConfigError("response has no row for shell b=" + std::to_string(want[i]));
      kept.coeffs.row(static_cast<Eigen::Index>(i)) = r.coeffs.row(it - all_shells.begin());
    }
    out.responses.push_back(kept);
  }
  out.op = build_operator(out.scheme, out.responses, job.cascade.l_max);
  std::vector<TrainingSubject> subjects;
  for (const auto& d : dirs) {
    if (d.dwi.channels() != full.volumes() || d.scheme.bvals() != full.bvals())
      throw ConfigError(d.path + ": acquisition differs from " + dirs.front().path);
    subjects.push_back(make_subject(select_dwi_volumes(d.dwi, sub), d.fod, d.wm_mask, d.gm_mask));
  }
  Volume tissue = subjects.front().wm_mask;
  for (int v = 0; v < tissue.voxel_count(); ++v)
    if (subjects.front().gm_mask.value(v, 0) >= 0.5f) tissue.set(v, 0, 1.0f);
  out.scale = estimate_scale(subjects.front().dwi, out.scheme, tissue);
  if (subjects.size() > 1) {
    out.validation = subjects.back();
    subjects.pop_back();
  } else {
    out.validation = subjects.front();
  }
  out.train = std::move(subjects);
  return out;
}

struct TrainJobResult {
  TrainResult result;
  std::optional<FixelClassifier> classifier;
  double classifier_accuracy = 0.0;  // on its own training set
};

/// Trains the fixel classifier (two-stage jobs only) and then the cascade.
inline TrainJobResult run_train_job(const TrainJob& job, const PreparedData& data, std::ostream* log = nullptr) {
  CascadeConfig cc = job.cascade;
  cc.m_in = data.op.rows();
  Cascade net(cc, data.op);
  net.init(job.init_seed);
  net.scale = data.scale;
  TrainJobResult out;
  if (job.stages == 2 && job.train.kappa > 0.0) {
    const LabelledFods set = classifier_training_set(job.classifier_data);
    out.classifier.emplace();
    train_classifier(*out.classifier, set.coeffs, set.labels, job.classifier);
    out.classifier_accuracy = classifier_accuracy(*out.classifier, set.coeffs, set.labels);
    if (log) *log << nlohmann::json{{"event", "classifier_trained"}, {"train_accuracy", out.classifier_accuracy}}.dump() << '\n';
  }
  out.result = train_sdnet(net, data.op, data.responses, data.train, data.validation,
                           out.classifier ? &*out.classifier : nullptr, job.train, log, StageRange{1, job.stages, 0});
  return out;
}

}  // namespace fodforge
