#include "softennet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <json.hpp>

#include "softennet/geometry.hpp"
#include "softennet/kv.hpp"
#include "softennet/log.hpp"

namespace softennet::train {
namespace fs = std::filesystem;
namespace {

namespace F = torch::nn::functional;
using nlohmann::json;

constexpr const char* kModelPrefix = "model.";

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

WeightingMode parse_weighting(const std::string& s) {
  if (s == "learned") return WeightingMode::learned;
  if (s == "fixed") return WeightingMode::fixed;
  throw std::invalid_argument(fmt::format("unknown weighting mode '{}' (expected learned or fixed)", s));
}

torch::Tensor to_full_resolution(const torch::Tensor& disparity, int64_t height, int64_t width) {
  if (disparity.size(2) == height && disparity.size(3) == width) return disparity;
  return F::interpolate(disparity, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{height, width})
                                       .mode(torch::kBilinear)
                                       .align_corners(false));
}

struct DirectionTerms {
  losses::ScaleTerms terms;
  torch::Tensor validity, ego_mask, dc;
  bool empty_validity = false;
  bool degenerate = false;
};

// Reconstructs `target` from `source` and scores it, for one scale.
DirectionTerms direction_terms(const torch::Tensor& target, const torch::Tensor& source,
                               const torch::Tensor& target_depth, const torch::Tensor& source_depth,
                               const geometry::Pose& target_to_source, const camera::CameraModel& cam,
                               const losses::LossWeights& w) {
  auto grid = geometry::warp_coordinates(target_depth, target_to_source, cam);
  auto recon = geometry::bilinear_sample(source, grid);
  auto validity = losses::validity_mask(target, recon.values, source, recon.mask);
  auto cost = losses::clip_outliers(losses::photometric_cost(target, recon.values, w.eta), validity,
                                    w.clip_percentile);
  auto photometric = losses::photometric_loss(cost, validity);
  auto depths = geometry::project_depth(target_depth, target_to_source, cam, source_depth);
  auto consistency = losses::depth_consistency(depths.projected, depths.sampled, validity);
  auto reweighted = losses::occlusion_reweight(cost, consistency.dc, validity);
  DirectionTerms out;
  out.terms = {photometric.value, reweighted.value, consistency.loss, losses::edge_smoothness(target, target_depth)};
  out.validity = validity;
  out.ego_mask = recon.mask;
  out.dc = consistency.dc.detach();
  out.empty_validity = photometric.empty;
  out.degenerate = consistency.degenerate;
  return out;
}

json bundle_json(const losses::LossBundle& b) {
  return json{{"L_v", b.photometric},
              {"L_v_prime", b.reweighted},
              {"L_c", b.consistency},
              {"L_e", b.smoothness},
              {"L_d", b.depth},
              {"L_l", b.lumen},
              {"L", b.total},
              {"gamma1", b.gamma_depth},
              {"gamma2", b.gamma_lumen},
              {"empty_validity", b.empty_validity},
              {"degenerate_consistency", b.degenerate_consistency}};
}

std::vector<torch::Tensor> trainable_parameters(TrainState& state) {
  auto params = state.model->parameters();
  if (state.config.weighting == WeightingMode::learned) {
    for (auto& p : state.uncertainty->parameters()) params.push_back(p);
  }
  return params;
}

void truncate_log(const fs::path& path, int64_t lines) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> kept;
  std::string line;
  while (static_cast<int64_t>(kept.size()) < lines && std::getline(in, line)) kept.push_back(line);
  in.close();
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

std::string to_string(WeightingMode mode) { return mode == WeightingMode::learned ? "learned" : "fixed"; }

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument(fmt::format("epochs must be at least 1, got {}", epochs));
  if (batch_size < 1) throw std::invalid_argument(fmt::format("batch size must be at least 1, got {}", batch_size));
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("learning-rate decay factor must be positive");
  if (stride < 1) throw std::invalid_argument("pair stride must be positive");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw std::invalid_argument("flip probability must lie in [0, 1]");
  }
  if (!(alpha_initial > 0.0) || alpha_period < 1) throw std::invalid_argument("invalid PAC-alpha schedule");
  if (fixed_depth_weight < 0.0 || fixed_lumen_weight < 0.0) throw std::invalid_argument("task weights must be >= 0");
  if (keep_checkpoints < 0) throw std::invalid_argument("keep_checkpoints must be >= 0");
  weights.validate();
  model.validate();
  if (weights.scales != model.scales) {
    throw std::invalid_argument(
        fmt::format("loss scales ({}) differ from model scales ({})", weights.scales, model.scales));
  }
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "full") {
    c.batch_size = 20;
    c.model.encoder = model::EncoderSize::standard;
  } else if (name == "desk") {
    // defaults
  } else if (name == "overfit") {
    c.epochs = 40;
    c.lr_decay_epoch = 28;
    c.lr_decay_factor = 0.2;
    c.learning_rate = 5e-4;
    c.alpha_period = 1;
    c.keep_checkpoints = 1;
  } else {
    throw std::invalid_argument(fmt::format("unknown preset '{}' (expected full, desk or overfit)", name));
  }
  return c;
}

std::string TrainConfig::to_text() const {
  KeyValueFile kv;
  kv.set("learning_rate", learning_rate);
  kv.set("lr_decay_epoch", lr_decay_epoch);
  kv.set("lr_decay_factor", lr_decay_factor);
  kv.set("epochs", epochs);
  kv.set("batch_size", batch_size);
  kv.set("eta", weights.eta);
  kv.set("sigma1", weights.sigma1);
  kv.set("sigma2", weights.sigma2);
  kv.set("sigma3", weights.sigma3);
  kv.set("clip_percentile", weights.clip_percentile);
  kv.set("weighting", to_string(weighting));
  kv.set("fixed_depth_weight", fixed_depth_weight);
  kv.set("fixed_lumen_weight", fixed_lumen_weight);
  kv.set("seed", std::to_string(seed));
  kv.set("stride", stride);
  kv.set("flip_probability", flip_probability);
  kv.set("alpha_initial", alpha_initial);
  kv.set("alpha_period", alpha_period);
  kv.set("grad_clip", grad_clip);
  kv.set("double_precision", double_precision);
  kv.set("keep_checkpoints", keep_checkpoints);
  const auto model_kv = KeyValueFile::parse(model.to_text());
  for (const auto& key : model_kv.keys()) kv.set(kModelPrefix + key, model_kv.get(key));
  return kv.to_text();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  const auto kv = KeyValueFile::parse(text);
  TrainConfig c;
  if (kv.contains("preset")) c = preset(kv.get("preset"));
  static const std::vector<std::string> known{
      "preset",        "learning_rate", "lr_decay_epoch",     "lr_decay_factor",    "epochs",
      "batch_size",    "eta",           "sigma1",             "sigma2",             "sigma3",
      "clip_percentile", "weighting",   "fixed_depth_weight", "fixed_lumen_weight", "seed",
      "stride",        "flip_probability", "alpha_initial",   "alpha_period",       "grad_clip",
      "double_precision", "keep_checkpoints"};
  KeyValueFile model_kv;
  for (const auto& key : kv.keys()) {
    if (key.rfind(kModelPrefix, 0) == 0) {
      model_kv.set(key.substr(std::string(kModelPrefix).size()), kv.get(key));
    } else if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument(fmt::format("unknown train config key '{}'", key));
    }
  }
  if (!model_kv.keys().empty()) {
    // Start from the preset's model settings, overridden key by key.
    auto merged = KeyValueFile::parse(c.model.to_text());
    KeyValueFile out;
    for (const auto& key : merged.keys()) out.set(key, model_kv.contains(key) ? model_kv.get(key) : merged.get(key));
    for (const auto& key : model_kv.keys()) {
      if (!merged.contains(key)) throw std::invalid_argument(fmt::format("unknown model config key '{}'", key));
    }
    c.model = model::SoftEnNetConfig::from_text(out.to_text());
  }
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.lr_decay_epoch = static_cast<int>(kv.get_int("lr_decay_epoch", c.lr_decay_epoch));
  c.lr_decay_factor = kv.get_double("lr_decay_factor", c.lr_decay_factor);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.weights.eta = kv.get_double("eta", c.weights.eta);
  c.weights.sigma1 = kv.get_double("sigma1", c.weights.sigma1);
  c.weights.sigma2 = kv.get_double("sigma2", c.weights.sigma2);
  c.weights.sigma3 = kv.get_double("sigma3", c.weights.sigma3);
  c.weights.clip_percentile = kv.get_double("clip_percentile", c.weights.clip_percentile);
  c.weights.scales = c.model.scales;
  c.weighting = parse_weighting(kv.get("weighting", to_string(c.weighting)));
  c.fixed_depth_weight = kv.get_double("fixed_depth_weight", c.fixed_depth_weight);
  c.fixed_lumen_weight = kv.get_double("fixed_lumen_weight", c.fixed_lumen_weight);
  if (kv.contains("seed")) c.seed = std::stoull(kv.get("seed"));
  c.stride = static_cast<int>(kv.get_int("stride", c.stride));
  c.flip_probability = kv.get_double("flip_probability", c.flip_probability);
  c.alpha_initial = kv.get_double("alpha_initial", c.alpha_initial);
  c.alpha_period = static_cast<int>(kv.get_int("alpha_period", c.alpha_period));
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.double_precision = kv.get_bool("double_precision", c.double_precision);
  c.keep_checkpoints = static_cast<int>(kv.get_int("keep_checkpoints", c.keep_checkpoints));
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  try {
    return from_text(KeyValueFile::load(path).to_text());
  } catch (const std::exception& e) {
    throw std::runtime_error(fmt::format("train config '{}': {}", path.string(), e.what()));
  }
}

// ---------------------------------------------------------------------------
// TrainState

double scheduled_learning_rate(const TrainConfig& config, int epoch) {
  return epoch >= config.lr_decay_epoch ? config.learning_rate * config.lr_decay_factor : config.learning_rate;
}

TrainState TrainState::create(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  torch::manual_seed(config.seed);
  s.model = model::SoftEnNet(config.model);
  s.uncertainty = losses::TaskUncertainty();
  if (config.double_precision) s.model->to(torch::kFloat64);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(s.model->parameters());
  if (config.weighting == WeightingMode::learned) groups.emplace_back(s.uncertainty->parameters());
  s.optimizer = std::make_unique<torch::optim::Adam>(groups, torch::optim::AdamOptions(config.learning_rate));
  return s;
}

torch::Dtype TrainState::dtype() const { return config.double_precision ? torch::kFloat64 : torch::kFloat32; }

double TrainState::learning_rate() const { return scheduled_learning_rate(config, epoch); }

double TrainState::alpha() const {
  return model::pac_alpha_schedule(epoch, config.alpha_initial, config.alpha_period);
}

double TrainState::inference_alpha() const {
  return model::pac_alpha_schedule(std::max(epoch - 1, 0), config.alpha_initial, config.alpha_period);
}

data::PairBatch to_dtype(const data::PairBatch& b, torch::Dtype dtype) {
  auto cast = [&](const torch::Tensor& t) { return t.defined() ? t.to(dtype) : t; };
  return {cast(b.target_rgb), cast(b.source_rgb), b.target_lumen, b.source_lumen, cast(b.target_depth),
          cast(b.source_depth)};
}

// ---------------------------------------------------------------------------
// Losses and the optimizer step

LossResult compute_losses(TrainState& state, const data::PairBatch& batch, const camera::CameraModel& cam,
                          double alpha) {
  const auto& w = state.config.weights;
  auto& net = state.model;
  const auto& target = batch.target_rgb;
  const auto& source = batch.source_rgb;
  const int64_t height = target.size(2);
  const int64_t width = target.size(3);

  auto out_t = net->forward(target, alpha);
  auto out_s = net->forward(source, alpha);
  auto target_to_source = geometry::pose_from_6dof(net->pose_from_features(out_t.bottleneck, out_s.bottleneck));
  auto source_to_target = target_to_source.inverse();

  LossResult result;
  auto& bundle = result.bundle;
  std::vector<losses::ScaleTerms> scale_terms;
  const auto& mc = state.config.model;
  for (int s = 0; s < w.scales; ++s) {
    auto depth_t = model::disparity_to_depth(to_full_resolution(out_t.disparity[s], height, width), mc.min_depth,
                                             mc.max_depth);
    auto depth_s = model::disparity_to_depth(to_full_resolution(out_s.disparity[s], height, width), mc.min_depth,
                                             mc.max_depth);
    auto forward = direction_terms(target, source, depth_t, depth_s, target_to_source, cam, w);
    auto backward = direction_terms(source, target, depth_s, depth_t, source_to_target, cam, w);
    losses::ScaleTerms avg{(forward.terms.photometric + backward.terms.photometric) / 2.0,
                           (forward.terms.reweighted + backward.terms.reweighted) / 2.0,
                           (forward.terms.consistency + backward.terms.consistency) / 2.0,
                           (forward.terms.smoothness + backward.terms.smoothness) / 2.0};
    bundle.photometric.push_back(avg.photometric.item<double>());
    bundle.reweighted.push_back(avg.reweighted.item<double>());
    bundle.consistency.push_back(avg.consistency.item<double>());
    bundle.smoothness.push_back(avg.smoothness.item<double>());
    bundle.validity.push_back(forward.validity);
    bundle.ego_mask.push_back(forward.ego_mask);
    bundle.dc.push_back(forward.dc);
    bundle.occlusion.push_back(1.0 - forward.dc);
    bundle.empty_validity = bundle.empty_validity || forward.empty_validity || backward.empty_validity;
    bundle.degenerate_consistency = bundle.degenerate_consistency || forward.degenerate || backward.degenerate;
    scale_terms.push_back(avg);
  }
  auto depth_loss = losses::total_depth_loss(scale_terms, w);

  torch::Tensor lumen_loss = torch::zeros({}, depth_loss.options());
  if (batch.target_lumen.defined() && batch.source_lumen.defined()) {
    const int64_t classes = mc.num_classes;
    const auto dtype = out_t.lumen_posteriors.scalar_type();
    lumen_loss = losses::lumen_loss(out_t.lumen_posteriors, out_s.lumen_posteriors,
                                    losses::one_hot(batch.target_lumen, classes, dtype),
                                    losses::one_hot(batch.source_lumen, classes, dtype));
  }

  auto g1 = state.uncertainty->gamma_depth();
  auto g2 = state.uncertainty->gamma_lumen();
  if (state.config.weighting == WeightingMode::learned) {
    result.total = losses::multitask_loss(depth_loss.to(torch::kFloat64), lumen_loss.to(torch::kFloat64), g1, g2);
  } else {
    result.total = losses::fixed_weight_loss(depth_loss, lumen_loss, state.config.fixed_depth_weight,
                                             state.config.fixed_lumen_weight);
  }
  bundle.depth = depth_loss.item<double>();
  bundle.lumen = lumen_loss.item<double>();
  bundle.total = result.total.item<double>();
  bundle.gamma_depth = g1.item<double>();
  bundle.gamma_lumen = g2.item<double>();
  return result;
}

losses::LossBundle train_step(TrainState& state, const data::PairBatch& batch, const camera::CameraModel& cam,
                              const fs::path& dump_path) {
  state.model->train();
  const double alpha = state.alpha();
  auto result = compute_losses(state, batch, cam, alpha);
  if (!result.bundle.finite()) {
    if (!dump_path.empty()) {
      std::ofstream out(dump_path);
      out << bundle_json(result.bundle).dump(2) << '\n';
    }
    throw NonFiniteLoss(fmt::format("non-finite loss at step {} (L_d={}, L_l={}, L={}){}", state.step,
                                    result.bundle.depth, result.bundle.lumen, result.bundle.total,
                                    dump_path.empty() ? "" : "; bundle written to " + dump_path.string()));
  }
  state.optimizer->zero_grad();
  result.total.backward();
  if (state.config.grad_clip > 0.0) {
    torch::nn::utils::clip_grad_norm_(trainable_parameters(state), state.config.grad_clip);
  }
  state.optimizer->step();
  ++state.step;
  state.epoch_loss_sum += result.bundle.total;
  ++state.epoch_loss_count;
  return result.bundle;
}

std::string log_record(const TrainState& state, const losses::LossBundle& bundle, double lr, double alpha) {
  json record{{"epoch", state.epoch}, {"step", state.step}, {"lr", lr}, {"alpha", alpha},
              {"weighting", to_string(state.config.weighting)}};
  record.update(bundle_json(bundle));
  return record.dump();
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& path, TrainState& state) {
  torch::serialize::OutputArchive archive;
  torch::serialize::OutputArchive model_archive, uncertainty_archive, optimizer_archive;
  state.model->save(model_archive);
  state.uncertainty->save(uncertainty_archive);
  state.optimizer->save(optimizer_archive);
  archive.write("model", model_archive);
  archive.write("uncertainty", uncertainty_archive);
  archive.write("optimizer", optimizer_archive);
  archive.write("train_config", c10::IValue(state.config.to_text()));
  archive.write("model_config", c10::IValue(state.config.model.to_text()));
  archive.write("camera", c10::IValue(state.camera ? state.camera->to_text() : std::string()));
  archive.write("epoch", c10::IValue(static_cast<int64_t>(state.epoch)));
  archive.write("step", c10::IValue(state.step));
  archive.write("epoch_loss_sum", c10::IValue(state.epoch_loss_sum));
  archive.write("epoch_loss_count", c10::IValue(state.epoch_loss_count));
  const auto tmp = fs::path(path.string() + ".tmp");
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error(fmt::format("checkpoint '{}' not found", path.string()));
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    c10::IValue value;
    archive.read("train_config", value);
    auto state = TrainState::create(TrainConfig::from_text(value.toStringRef()));
    torch::serialize::InputArchive model_archive, uncertainty_archive, optimizer_archive;
    archive.read("model", model_archive);
    archive.read("uncertainty", uncertainty_archive);
    archive.read("optimizer", optimizer_archive);
    state.model->load(model_archive);
    state.uncertainty->load(uncertainty_archive);
    state.optimizer->load(optimizer_archive);
    archive.read("camera", value);
    if (!value.toStringRef().empty()) state.camera = camera::CameraModel::from_text(value.toStringRef());
    archive.read("epoch", value);
    state.epoch = static_cast<int>(value.toInt());
    archive.read("step", value);
    state.step = value.toInt();
    archive.read("epoch_loss_sum", value);
    state.epoch_loss_sum = value.toDouble();
    archive.read("epoch_loss_count", value);
    state.epoch_loss_count = value.toInt();
    return state;
  } catch (const c10::Error& e) {
    throw std::runtime_error(fmt::format("checkpoint '{}' is unreadable: {}", path.string(), e.what_without_backtrace()));
  }
}

// ---------------------------------------------------------------------------
// fit

TrainState fit(const data::Sequence& sequence, const TrainConfig& config, const fs::path& out_dir,
               const FitOptions& options) {
  config.validate();
  if (sequence.frames.size() < 2) throw std::invalid_argument("training needs at least 2 frames");
  fs::create_directories(out_dir / "checkpoints");
  const auto last = out_dir / "last.pt";
  const auto log_path = out_dir / "log.jsonl";

  TrainState state;
  if (options.resume && fs::exists(last)) {
    state = load_checkpoint(last);
    if (state.config.to_text() != config.to_text()) {
      throw std::runtime_error(
          fmt::format("'{}' was written with a different train config; use a fresh output directory", last.string()));
    }
    if (state.camera && !(*state.camera == sequence.camera)) {
      throw std::runtime_error(fmt::format("'{}' was trained on a different camera", last.string()));
    }
    truncate_log(log_path, state.step);
    log::info(fmt::format("resuming from epoch {} (step {})", state.epoch, state.step));
  } else {
    state = TrainState::create(config);
    state.camera = sequence.camera;
    std::ofstream(log_path, std::ios::trunc);
  }
  std::ofstream(out_dir / "train.cfg", std::ios::trunc | std::ios::binary) << config.to_text();

  const auto pairs = data::adjacent_pairs(sequence, config.stride);
  if (pairs.empty()) throw std::invalid_argument("sequence too short for the configured pair stride");
  std::ofstream log_file(log_path, std::ios::app | std::ios::binary);

  int ran = 0;
  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    const double lr = state.learning_rate();
    for (auto& group : state.optimizer->param_groups()) group.options().set_lr(lr);
    const double alpha = state.alpha();

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix(config.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t first = 0, b = 0; first < order.size(); first += config.batch_size, ++b) {
      std::vector<data::PairIndex> chunk;
      for (std::size_t i = first; i < std::min(order.size(), first + config.batch_size); ++i) {
        chunk.push_back(pairs[order[i]]);
      }
      std::mt19937_64 aug_rng(mix(mix(config.seed, static_cast<uint64_t>(epoch)), b));
      auto batch = to_dtype(
          data::augment(data::make_batch(sequence, chunk), config.flip_probability, sequence.camera, aug_rng),
          state.dtype());
      const auto dump = out_dir / fmt::format("nonfinite_step_{}.json", state.step);
      auto bundle = train_step(state, batch, sequence.camera, dump);
      log_file << log_record(state, bundle, lr, alpha) << '\n';
      log_file.flush();
    }

    log::info(fmt::format("epoch {}/{}: mean loss {:.5f}, lr {:g}, alpha {:g}, step {}", epoch + 1, config.epochs,
                          state.epoch_loss_sum / std::max<int64_t>(state.epoch_loss_count, 1), lr, alpha,
                          state.step));
    state.epoch = epoch + 1;
    state.epoch_loss_sum = 0.0;
    state.epoch_loss_count = 0;
    const auto archive = out_dir / "checkpoints" / fmt::format("epoch_{:04d}.pt", state.epoch);
    save_checkpoint(archive, state);
    fs::copy_file(archive, last, fs::copy_options::overwrite_existing);
    if (config.keep_checkpoints > 0 && state.epoch > config.keep_checkpoints) {
      fs::remove(out_dir / "checkpoints" / fmt::format("epoch_{:04d}.pt", state.epoch - config.keep_checkpoints));
    }
    if (options.stop_after_epochs > 0 && ++ran >= options.stop_after_epochs) break;
  }
  return state;
}

}  // namespace softennet::train
