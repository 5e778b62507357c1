#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fodforge/checkpoint.hpp"
#include "fodforge/csd_solver.hpp"
#include "fodforge/error.hpp"
#include "fodforge/evaluate.hpp"
#include "fodforge/fixel.hpp"
#include "fodforge/phantom.hpp"
#include "fodforge/pipeline.hpp"
#include "fodforge/training.hpp"
#include "fodforge/volume.hpp"

namespace ff = fodforge;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

const char* kConvertText =
    "FODV1 to NIfTI-1 mapping\n"
    "  dims [x,y,z,c]        dim[0]=4 (3 when c=1), dim[1..4]=x,y,z,c\n"
    "  payload               datatype FLOAT32 (16), bitpix 32, x fastest then y, z, channel\n"
    "  voxel_size            pixdim[1..3], qform/sform diagonal, origin at voxel (0,0,0)\n"
    "  kind dwi              4D series; meta.bvec / meta.bval are FSL-style bvec/bval text\n"
    "  kind fod              channels 0..44 real SH (l_max 8, even orders), 45 GM, 46 CSF\n"
    "  kind mask, counts     3D volume, values 0/1 or integer fixel counts stored as float\n"
    "Conversion is left to external NIfTI tooling; this command only documents the layout.\n";

int default_threads() {
  if (const char* env = std::getenv("FODFORGE_THREADS")) {
    try {
      const int t = std::stoi(env);
      if (t >= 1) return t;
    } catch (const std::exception&) {
    }
    throw ff::ConfigError(std::string("FODFORGE_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::vector<std::string> split_commas(const std::string& s, std::size_t expected, const char* what) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    parts.push_back(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (parts.size() != expected)
    throw ff::ConfigError(std::string(what) + " expects " + std::to_string(expected) + " comma-separated paths");
  return parts;
}

ff::Volume read_typed(const std::string& path, ff::VolumeKind kind, const std::string& role) {
  ff::Volume v = ff::read_volume(path);
  ff::expect_kind(v, kind, role + " '" + path + "'");
  return v;
}

ff::Volume full_mask(const ff::Volume& like) {
  ff::Volume m(like.spatial(), 1, ff::VolumeKind::Mask);
  m.voxel_size = like.voxel_size;
  for (int v = 0; v < m.voxel_count(); ++v) m.set(v, 0, 1.0f);
  return m;
}

void require_same_grid(const ff::Volume& a, const std::string& an, const ff::Volume& b, const std::string& bn) {
  if (a.spatial() != b.spatial())
    throw ff::InvalidInput(an + " " + a.shape_string() + " and " + bn + " " + b.shape_string() + " differ spatially");
}

/// Volumes of `dwi` matching the checkpoint scheme, in checkpoint order.
ff::Volume match_scheme(const ff::Volume& dwi, const ff::AcquisitionScheme& want) {
  const ff::AcquisitionScheme have = ff::scheme_of(dwi);
  if (have.volumes() != dwi.channels())
    throw ff::InvalidInput("DWI header lists " + std::to_string(have.volumes()) + " gradients for " +
                           std::to_string(dwi.channels()) + " volumes");
  std::vector<bool> used(static_cast<std::size_t>(have.volumes()), false);
  ff::Subsampled sub{want, {}};
  for (int k = 0; k < want.volumes(); ++k) {
    const double b = want.bvals()[static_cast<std::size_t>(k)];
    const ff::Vec3& g = want.bvecs()[static_cast<std::size_t>(k)];
    int found = -1;
    for (int v = 0; v < have.volumes() && found < 0; ++v) {
      if (used[static_cast<std::size_t>(v)] || std::abs(have.bvals()[static_cast<std::size_t>(v)] - b) > 1e-3 * std::max(1.0, b))
        continue;
      const ff::Vec3& h = have.bvecs()[static_cast<std::size_t>(v)];
      if (want.is_b0(k) || (h - g).norm() < 1e-4 || (h + g).norm() < 1e-4) found = v;
    }
    if (found < 0)
      throw ff::ConfigError("DWI has no volume matching checkpoint gradient " + std::to_string(k) + " (b=" +
                            std::to_string(b) + ")");
    used[static_cast<std::size_t>(found)] = true;
    sub.retained.push_back(found);
  }
  bool identity = dwi.channels() == want.volumes();
  for (std::size_t k = 0; identity && k < sub.retained.size(); ++k) identity = sub.retained[k] == static_cast<int>(k);
  if (identity) return dwi;
  ff::Volume out(dwi.spatial(), want.volumes(), ff::VolumeKind::Dwi);
  out.voxel_size = dwi.voxel_size;
  for (int v = 0; v < dwi.voxel_count(); ++v)
    for (std::size_t k = 0; k < sub.retained.size(); ++k) out.set(v, static_cast<int>(k), dwi.value(v, sub.retained[k]));
  const auto [bvec, bval] = ff::serialize_scheme(want);
  out.meta = {{"bvec", bvec}, {"bval", bval}};
  return out;
}

// ---------------------------------------------------------------- commands

struct PhantomArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

void cmd_phantom(const PhantomArgs& a) {
  ff::PhantomSpec spec = a.spec.empty() ? ff::default_phantom_spec() : ff::phantom_spec_from_json(ff::read_json_file(a.spec));
  if (a.seed) spec.seed = *a.seed;
  ff::write_phantom_dir(a.out, ff::build_phantom(spec));
}

struct FitCsdArgs {
  std::string dwi, scheme, response, mask, out;
  int threads = 1;
};

void cmd_fit_csd(const FitCsdArgs& a) {
  const ff::Volume dwi = read_typed(a.dwi, ff::VolumeKind::Dwi, "DWI");
  ff::AcquisitionScheme scheme;
  if (a.scheme.empty()) {
    scheme = ff::scheme_of(dwi);
  } else {
    const auto p = split_commas(a.scheme, 2, "--scheme");
    scheme = ff::parse_scheme(ff::detail::read_file(p[0]), ff::detail::read_file(p[1]));
  }
  const auto r = split_commas(a.response, 3, "--response");
  std::vector<ff::ResponseFunction> responses;
  const ff::Tissue tissues[] = {ff::Tissue::WM, ff::Tissue::GM, ff::Tissue::CSF};
  for (int t = 0; t < 3; ++t) responses.push_back(ff::parse_response(ff::detail::read_file(r[t]), tissues[t]));
  const int l_max = 2 * (static_cast<int>(responses.front().coeffs.cols()) - 1);
  const ff::ConvolutionOperator op = ff::build_operator(scheme, responses, l_max);
  const ff::Volume mask = a.mask.empty() ? full_mask(dwi) : read_typed(a.mask, ff::VolumeKind::Mask, "mask");
  require_same_grid(dwi, "DWI", mask, "mask");
  ff::VoxelwiseFit fit = ff::fit_voxelwise(dwi, op, mask, {}, a.threads);
  fit.fod.meta = {{"l_max_wm", l_max}, {"tissues", {"wm", "gm", "csf"}}};
  ff::write_volume(a.out, fit.fod);
  if (fit.not_converged) std::cerr << "warning: " << fit.not_converged << " voxels did not converge\n";
}

struct ReconstructArgs {
  std::string dwi, checkpoint, mask, out;
  bool no_dc = false;
};

void cmd_reconstruct(const ReconstructArgs& a) {
  const ff::Checkpoint ck = ff::read_checkpoint(a.checkpoint);
  ff::LoadedCascade loaded = ff::load_cascade(ck);
  const ff::Volume dwi = match_scheme(read_typed(a.dwi, ff::VolumeKind::Dwi, "DWI"), loaded.op.scheme);
  const ff::Volume mask = a.mask.empty() ? full_mask(dwi) : read_typed(a.mask, ff::VolumeKind::Mask, "mask");
  require_same_grid(dwi, "DWI", mask, "mask");
  ff::Volume fod;
  if (a.no_dc) {
    ff::CascadeConfig cfg = loaded.net.config();
    cfg.dc_enabled = false;
    ff::Cascade net(cfg, loaded.op);
    net.scale = loaded.net.scale;
    ff::restore_tensors(net.params(), ck.tensors);
    fod = ff::reconstruct_volume(net, dwi, mask);
  } else {
    fod = ff::reconstruct_volume(loaded.net, dwi, mask);
  }
  ff::write_volume(a.out, fod);
}

struct TrainArgs {
  std::string data, config, out;
  std::optional<std::uint64_t> seed;
};

void cmd_train(const TrainArgs& a) {
  ff::TrainJob job = a.config.empty() ? ff::train_job_from_json(nlohmann::json::object())
                                      : ff::train_job_from_json(ff::read_json_file(a.config));
  if (a.seed) {
    job.train.seed = *a.seed;
    job.init_seed = *a.seed;
  }
  std::vector<ff::PhantomDir> dirs;
  for (const auto& d : ff::list_phantom_dirs(a.data)) dirs.push_back(ff::read_phantom_dir(d));
  const ff::PreparedData data = ff::prepare_training_data(dirs, job);
  std::ofstream log(a.out + ".log.jsonl", std::ios::trunc);
  if (!log) throw ff::IoError("cannot open '" + a.out + ".log.jsonl' for writing");
  log << nlohmann::json{{"event", "job"}, {"job", ff::to_json(job)}, {"train_subjects", data.train.size()}}.dump() << '\n';
  const ff::TrainJobResult r = ff::run_train_job(job, data, &log);
  if (!log) throw ff::IoError("write to '" + a.out + ".log.jsonl' failed");
  ff::write_checkpoint(a.out + ".stage1", r.result.stage1);
  ff::write_checkpoint(a.out, r.result.stage2);
  if (r.result.diverged) std::cerr << "warning: training diverged; the last finite weights were kept\n";
}

struct SegmentArgs {
  std::string fod, mask, out;
  double peak_threshold = ff::kPeakThreshold;
};

void cmd_segment(const SegmentArgs& a) {
  const ff::Volume fod = read_typed(a.fod, ff::VolumeKind::Fod, "FOD");
  std::optional<ff::Volume> mask;
  if (!a.mask.empty()) mask = read_typed(a.mask, ff::VolumeKind::Mask, "mask");
  ff::write_fixel_dir(a.out, ff::segment_volume(fod, mask ? &*mask : nullptr, a.peak_threshold));
}

struct EvaluateArgs {
  std::string pred, truth, mask, roi, report;
  double peak_threshold = ff::kPeakThreshold;
  bool table = false;
};

void cmd_evaluate(const EvaluateArgs& a) {
  const ff::Volume pred = read_typed(a.pred, ff::VolumeKind::Fod, "prediction");
  const ff::Volume truth = read_typed(a.truth, ff::VolumeKind::Fod, "ground truth");
  const ff::Volume mask = read_typed(a.mask, ff::VolumeKind::Mask, "mask");
  std::optional<ff::Volume> roi;
  if (!a.roi.empty()) roi = ff::read_volume(a.roi);
  const nlohmann::json report = ff::evaluation_report(pred, truth, mask, roi ? &*roi : nullptr, a.peak_threshold);
  ff::detail::write_file(a.report, report.dump(2) + "\n");
  if (a.table) std::cout << ff::report_table(report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spherical deconvolution: phantoms, constrained fitting and unrolled networks"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "fodforge 1.0");
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: FODFORGE_THREADS or 1)")->check(CLI::PositiveNumber);

  PhantomArgs pa;
  std::uint64_t seed_value = 0;
  auto* phantom = app.add_subcommand("phantom", "Write a synthetic phantom directory");
  phantom->add_option("--spec", pa.spec, "Phantom spec JSON (default: built-in spec)");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  auto* phantom_seed = phantom->add_option("--seed", seed_value, "Override the seed in the phantom JSON");

  FitCsdArgs fa;
  auto* fit = app.add_subcommand("fit-csd", "Voxelwise multi-tissue constrained deconvolution");
  fit->add_option("--dwi", fa.dwi, "DWI volume")->required();
  fit->add_option("--scheme", fa.scheme, "bvec,bval files (default: scheme in the DWI header)");
  fit->add_option("--response", fa.response, "wm,gm,csf response files")->required();
  fit->add_option("--mask", fa.mask, "Mask volume (default: every voxel)");
  fit->add_option("--out", fa.out, "Output FOD volume")->required();

  ReconstructArgs ra;
  auto* recon = app.add_subcommand("reconstruct", "Run a trained cascade on a DWI volume");
  recon->add_option("--dwi", ra.dwi, "DWI volume (full or already subsampled)")->required();
  recon->add_option("--checkpoint", ra.checkpoint, "Cascade checkpoint")->required();
  recon->add_option("--mask", ra.mask, "Mask volume (default: every voxel)");
  recon->add_option("--out", ra.out, "Output FOD volume")->required();
  recon->add_flag("--no-dc", ra.no_dc, "Skip the data-consistency blocks");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the cascade on phantom directories");
  train->add_option("--data", ta.data, "Phantom directory or a directory of them (the last is held out)")->required();
  train->add_option("--config", ta.config, "Training job JSON (default: desk presets)");
  train->add_option("--out", ta.out, "Output checkpoint")->required();
  auto* train_seed = train->add_option("--seed", seed_value, "Initialisation and sampling seed");

  SegmentArgs sa;
  auto* segment = app.add_subcommand("segment", "Segment FOD lobes into fixels");
  segment->add_option("--fod", sa.fod, "FOD volume")->required();
  segment->add_option("--mask", sa.mask, "Mask volume");
  segment->add_option("--out", sa.out, "Output fixel directory")->required();
  segment->add_option("--peak-threshold", sa.peak_threshold, "Minimum lobe peak amplitude");

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Compare predicted and ground-truth FODs");
  evaluate->add_option("--pred", ea.pred, "Predicted FOD volume")->required();
  evaluate->add_option("--truth", ea.truth, "Ground-truth FOD volume")->required();
  evaluate->add_option("--mask", ea.mask, "Mask volume")->required();
  evaluate->add_option("--roi", ea.roi, "Extra ROI: a mask, or a counts volume split by count");
  evaluate->add_option("--report", ea.report, "Output JSON report")->required();
  evaluate->add_option("--peak-threshold", ea.peak_threshold, "Minimum lobe peak amplitude");
  evaluate->add_flag("--table", ea.table, "Print a summary table");

  auto* convert = app.add_subcommand("convert", "Describe the mapping between FODV1 and NIfTI");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const int nthreads = threads > 0 ? threads : default_threads();
    if (phantom->parsed()) {
      if (phantom_seed->count()) pa.seed = seed_value;
      cmd_phantom(pa);
    } else if (fit->parsed()) {
      fa.threads = nthreads;
      cmd_fit_csd(fa);
    } else if (recon->parsed()) {
      cmd_reconstruct(ra);
    } else if (train->parsed()) {
      if (train_seed->count()) ta.seed = seed_value;
      cmd_train(ta);
    } else if (segment->parsed()) {
      cmd_segment(sa);
    } else if (evaluate->parsed()) {
      cmd_evaluate(ea);
    } else if (convert->parsed()) {
      std::cout << kConvertText;
    }
  } catch (const ff::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ff::InternalError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  } catch (const ff::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
