#include "schedlab/trainer/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "schedlab/util/error.hpp"
#include "schedlab/util/json_fields.hpp"

namespace schedlab::trainer {
namespace fs = std::filesystem;
namespace ops = ad::ops;
using nlohmann::json;
using model::Model;

// --- schedule ----------------------------------------------------------------

std::size_t ScheduleSpec::total_epochs() const {
  std::size_t n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

void ScheduleSpec::validate() const {
  if (phases.empty()) throw InvalidArgument("schedule: no phases");
  for (const auto& p : phases) {
    if (p.epochs < 1) throw InvalidArgument("schedule: phase '" + p.name + "' needs at least one epoch");
    if (!(p.alpha >= 0.0 && p.alpha <= 1.0))
      throw InvalidArgument("schedule: phase '" + p.name + "' has alpha outside [0, 1]");
  }
  if (batch_size < 1) throw InvalidArgument("schedule: batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw InvalidArgument("schedule: lr0 must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
    throw InvalidArgument("schedule: warmup_fraction must lie in (0, 1)");
  if (checkpoint_period < 1) throw InvalidArgument("schedule: checkpoint_period must be >= 1");
}

void to_json(json& j, const PhaseSpec& p) {
  j = json{{"name", p.name}, {"alpha", p.alpha}, {"epochs", p.epochs}, {"reset_optimizer_on_entry", p.reset_optimizer_on_entry}};
}

void from_json(const json& j, PhaseSpec& p) {
  JsonFields(j, "phase")
      .req("name", p.name)
      .req("alpha", p.alpha)
      .req("epochs", p.epochs)
      .opt("reset_optimizer_on_entry", p.reset_optimizer_on_entry)
      .finish();
}

void to_json(json& j, const ScheduleSpec& s) {
  j = json{{"variant", s.variant},
           {"phases", s.phases},
           {"seed", s.seed},
           {"batch_size", s.batch_size},
           {"lr0", s.lr0},
           {"warmup_fraction", s.warmup_fraction},
           {"checkpoint_period", s.checkpoint_period},
           {"restart_lr_on_reset", s.restart_lr_on_reset}};
}

void from_json(const json& j, ScheduleSpec& s) {
  JsonFields(j, "schedule")
      .opt("variant", s.variant)
      .req("phases", s.phases)
      .opt("seed", s.seed)
      .opt("batch_size", s.batch_size)
      .opt("lr0", s.lr0)
      .opt("warmup_fraction", s.warmup_fraction)
      .opt("checkpoint_period", s.checkpoint_period)
      .opt("restart_lr_on_reset", s.restart_lr_on_reset)
      .finish();
  s.validate();
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"VGS",         "W2V2",         "VGS+",
                                              "(W2V2, VGS+)", "(VGS, VGS+)", "(W2V2, VGS)",
                                              "(VGS, W2V2)", "(VGS+, W2V2)", "(VGS+, VGS)"};
  return names;
}

namespace {

std::string squash(const std::string& s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out += c;
  return out;
}

PhaseSpec base_phase(const std::string& base, std::size_t epochs, bool reset) {
  if (base == "VGS") return {"VGS", 1.0, epochs, reset};
  if (base == "W2V2") return {"W2V2", 0.0, epochs, reset};
  return {"VGS+", 0.5, epochs, reset};
}

constexpr std::size_t kPretrainEpochs = 20;
constexpr std::size_t kMainEpochs = 50;

}  // namespace

ScheduleSpec variant_preset(const std::string& name) {
  return variant_preset(name, kPretrainEpochs, kMainEpochs);
}

ScheduleSpec variant_preset(const std::string& name, std::size_t pretrain_epochs, std::size_t main_epochs) {
  const std::string key = squash(name);
  for (const auto& canonical : variant_names()) {
    if (squash(canonical) != key) continue;
    ScheduleSpec s;
    s.variant = canonical;
    if (canonical.front() != '(') {
      s.phases.push_back(base_phase(canonical, pretrain_epochs + main_epochs, false));
    } else {
      const auto comma = key.find(',');
      s.phases.push_back(base_phase(key.substr(1, comma - 1), pretrain_epochs, false));
      s.phases.push_back(base_phase(key.substr(comma + 1, key.size() - comma - 2), main_epochs, true));
    }
    return s;
  }
  std::string list;
  for (const auto& n : variant_names()) list += (list.empty() ? "" : ", ") + n;
  throw InvalidArgument("unknown variant '" + name + "'; valid variants: " + list);
}

double lr_at(std::size_t step, std::size_t total_steps, double warmup_fraction, double lr0) {
  if (total_steps == 0) throw InvalidArgument("lr_at: total_steps must be positive");
  if (step > total_steps) throw InvalidArgument("lr_at: step beyond total_steps");
  const auto w = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < w) return lr0 * static_cast<double>(step) / static_cast<double>(w);
  if (total_steps == w) return lr0;
  return lr0 * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w);
}

// --- log -----------------------------------------------------------------------

void TrainLog::append(const EpochRow& row) {
  if (!rows_.empty() && row.epoch <= rows_.back().epoch)
    throw InvalidArgument("train log: epochs must be strictly increasing");
  rows_.push_back(row);
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string TrainLog::csv() const {
  std::ostringstream os;
  os << kHeader << '\n';
  for (const auto& r : rows_) {
    os << r.epoch << ',' << r.phase << ',' << num(r.alpha) << ',' << num(r.loss_av) << ',' << num(r.loss_aud_r)
       << ',' << num(r.loss_aud_d) << ',' << num(r.loss_combined) << ',' << num(r.lr) << ',' << num(r.seconds)
       << '\n';
  }
  return os.str();
}

void TrainLog::write_csv(const fs::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << csv();
}

TrainLog TrainLog::read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kHeader) throw IoError("unexpected train log header in " + path.string());
  TrainLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw IoError("malformed train log row: " + line);
    EpochRow r;
    r.epoch = std::stoul(f[0]);
    r.phase = f[1];
    r.alpha = std::stod(f[2]);
    r.loss_av = std::stod(f[3]);
    r.loss_aud_r = std::stod(f[4]);
    r.loss_aud_d = std::stod(f[5]);
    r.loss_combined = std::stod(f[6]);
    r.lr = std::stod(f[7]);
    r.seconds = std::stod(f[8]);
    log.append(r);
  }
  return log;
}

// --- helpers -------------------------------------------------------------------

template <typename T>
ad::Tensor<T> frames_tensor(const corpus::Utterance& u, std::size_t feat_dim) {
  return ad::Tensor<T>::from({feat_dim, u.n_frames}, std::vector<T>(u.frames.begin(), u.frames.end()));
}

template <typename T>
ad::Tensor<T> tokens_tensor(const corpus::ImageScene& s, std::size_t token_dim) {
  return ad::Tensor<T>::from({s.objects.size(), token_dim}, std::vector<T>(s.tokens.begin(), s.tokens.end()));
}

template ad::Tensor<float> frames_tensor<float>(const corpus::Utterance&, std::size_t);
template ad::Tensor<double> frames_tensor<double>(const corpus::Utterance&, std::size_t);
template ad::Tensor<float> tokens_tensor<float>(const corpus::ImageScene&, std::size_t);
template ad::Tensor<double> tokens_tensor<double>(const corpus::ImageScene&, std::size_t);

std::uint64_t model_seed(std::uint64_t schedule_seed) { return mix_seed({schedule_seed, 0x6d6f64656c696eULL}); }

fs::path checkpoint_dir(const fs::path& run_dir, std::size_t epoch) {
  return run_dir / ("ckpt_" + std::to_string(epoch));
}

std::vector<std::size_t> available_checkpoints(const fs::path& run_dir) {
  std::vector<std::size_t> out;
  if (!fs::is_directory(run_dir)) return out;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const auto name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("ckpt_", 0) != 0) continue;
    const auto tail = name.substr(5);
    if (tail.empty() || !std::all_of(tail.begin(), tail.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      continue;
    out.push_back(std::stoul(tail));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Model<float> load_checkpoint(const fs::path& run_dir, std::size_t epoch) {
  const auto dir = checkpoint_dir(run_dir, epoch);
  if (!fs::exists(dir / "model.json")) {
    std::string list;
    for (auto e : available_checkpoints(run_dir)) list += (list.empty() ? "" : ", ") + std::to_string(e);
    throw InvalidArgument("no checkpoint for epoch " + std::to_string(epoch) + " in " + run_dir.string() +
                          "; available epochs: {" + list + "}");
  }
  return model::load_model<float>(dir);
}

namespace {

enum StreamTag : std::uint64_t { kShuffle = 1, kStep = 2, kMonitor = 3 };

Model<float> copy_model(const Model<float>& src) {
  Model<float> m(src.config());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    auto dst = m.params()[i].value.mutable_values();
    auto from = src.params()[i].value.values();
    std::copy(from.begin(), from.end(), dst.begin());
  }
  return m;
}

struct BatchValues {
  double av = 0.0, r = 0.0, d = 0.0, combined = 0.0, recall1 = 0.0;

  void take(const BatchLoss<float>& b) {
    if (b.av) av = b.av->item();
    if (b.r) r = b.r->item(), d = b.d->item();
    combined = b.total.item();
    recall1 = b.recall1;
  }
};

template <typename T>
double batch_recall1(const ad::Tensor<T>& audio, const ad::Tensor<T>& image, std::span<const std::uint32_t> ids) {
  const std::size_t b = audio.dim(0), e = audio.dim(1);
  auto a = audio.values();
  auto v = image.values();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    T best_s = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < e; ++k) s += a[i * e + k] * v[j * e + k];
      if (s > best_s) best_s = s, best = j;
    }
    hits += ids[best] == ids[i];
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

std::vector<std::uint8_t> active_mask(const Model<float>& m, double alpha) {
  std::vector<std::uint8_t> active;
  for (const auto& p : m.params()) {
    bool on = true;
    if (alpha == 1.0 && p.group == model::ParamGroup::ssl_only) on = false;
    if (alpha == 0.0 && (p.group == model::ParamGroup::image_only || p.group == model::ParamGroup::vgs_audio_only))
      on = false;
    active.push_back(on ? 1 : 0);
  }
  return active;
}

}  // namespace

template <typename T>
BatchLoss<T> batch_loss(ad::Tape<T>& tape, const model::Model<T>& model, const corpus::Corpus& corpus,
                        std::span<const std::uint32_t> batch, double alpha, const objectives::LossConfig& loss,
                        const model::ForwardContext& ctx, Rng& rng) {
  if (batch.empty()) throw InvalidArgument("batch_loss: empty batch");
  const auto& cfg = model.config();
  BatchLoss<T> out;
  if (alpha > 0.0) {
    std::vector<ad::Tensor<T>> audio, image;
    std::vector<std::uint32_t> ids;
    for (auto idx : batch) {
      const auto& u = corpus.utterances.at(idx);
      if (!u.image) throw InvalidArgument("batch_loss: utterance without an image in a VGS batch");
      const auto& scene = corpus.scenes.at(*u.image);
      auto vg = model.forward_vgs(tape, frames_tensor<T>(u, cfg.feat_dim),
                                  tokens_tensor<T>(scene, cfg.image_token_dim), ctx);
      audio.push_back(vg.audio);
      image.push_back(vg.image);
      ids.push_back(*u.image);
    }
    auto a = ops::concat_rows(tape, audio);
    auto v = ops::concat_rows(tape, image);
    out.recall1 = batch_recall1(a, v, ids);
    out.av = objectives::loss_av(tape, a, v, objectives::duplicate_mask(ids), loss.tau);
  }
  if (alpha < 1.0) {
    std::vector<ad::Tensor<T>> per_utt, probs;
    for (auto idx : batch) {
      const auto& u = corpus.utterances.at(idx);
      auto ssl = model.forward_ssl(tape, frames_tensor<T>(u, cfg.feat_dim), rng, ctx);
      auto plan = objectives::sample_distractors(ssl.mask.positions, ssl.mask.length, loss.distractors, rng);
      per_utt.push_back(
          ops::reshape(tape, objectives::loss_aud_contrastive(tape, ssl.context, ssl.targets, plan, loss.kappa), {1}));
      probs.push_back(ssl.code_probs);
    }
    out.r = ops::mean(tape, ops::concat_rows(tape, per_utt));
    out.d = objectives::loss_aud_diversity(tape, ops::concat_rows(tape, probs), cfg.codebook.groups,
                                           cfg.codebook.entries);
  }
  out.total = objectives::combined_loss<T>(tape, alpha, out.av ? &*out.av : nullptr, out.r ? &*out.r : nullptr,
                                           out.d ? &*out.d : nullptr, loss.diversity_weight);
  return out;
}

template BatchLoss<float> batch_loss<float>(ad::Tape<float>&, const model::Model<float>&, const corpus::Corpus&,
                                            std::span<const std::uint32_t>, double, const objectives::LossConfig&,
                                            const model::ForwardContext&, Rng&);
template BatchLoss<double> batch_loss<double>(ad::Tape<double>&, const model::Model<double>&, const corpus::Corpus&,
                                              std::span<const std::uint32_t>, double,
                                              const objectives::LossConfig&, const model::ForwardContext&, Rng&);

TrainResult run_schedule(const ScheduleSpec& spec, const corpus::Corpus& corpus, const model::ModelConfig& config,
                         const fs::path& out, const TrainOptions& options, const Model<float>* initial) {
  spec.validate();
  options.loss.validate();
  config.validate();
  if (config.feat_dim != corpus.phones.feat_dim || config.image_token_dim != corpus.spec.image_token_dim)
    throw InvalidArgument("model config does not match the corpus feature or image-token dims");
  const auto train_utts = corpus.utterances_of(corpus.train_images);
  if (train_utts.empty()) throw InvalidArgument("corpus has no training captions");

  fs::create_directories(out);
  {
    json run{{"schedule", spec}, {"model", config}, {"loss", options.loss},
             {"adam",
              {{"beta1", options.adam.beta1},
               {"beta2", options.adam.beta2},
               {"eps", options.adam.eps},
               {"weight_decay", options.adam.weight_decay},
               {"grad_clip", options.adam.grad_clip}}},
             {"monitor_inactive", options.monitor_inactive},
             {"corpus_seed", corpus.seed}};
    for (const auto& [k, v] : options.run_extra.items()) run[k] = v;
    std::ofstream os(out / "run.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "run.json").string());
    os << run.dump(1) << '\n';
  }

  Model<float> model = initial ? copy_model(*initial) : Model<float>(config, model_seed(spec.seed));
  if (initial && json(initial->config()) != json(config))
    throw InvalidArgument("initial model config differs from the requested config");
  auto tensors = model.tensors();
  ad::AdamConfig adam_cfg = options.adam;
  adam_cfg.lr0 = spec.lr0;
  ad::AdamState<float> adam(tensors, adam_cfg);

  const std::size_t steps_per_epoch = (train_utts.size() + spec.batch_size - 1) / spec.batch_size;
  // LR segments: a new one starts at every optimizer reset when restarting.
  std::vector<std::size_t> segment_of_phase(spec.phases.size(), 0);
  std::vector<std::size_t> segment_steps{0};
  for (std::size_t p = 0; p < spec.phases.size(); ++p) {
    if (p > 0 && spec.phases[p].reset_optimizer_on_entry && spec.restart_lr_on_reset) segment_steps.push_back(0);
    segment_of_phase[p] = segment_steps.size() - 1;
    segment_steps.back() += spec.phases[p].epochs * steps_per_epoch;
  }

  TrainResult result{copy_model(model), {}, {}};
  std::ofstream timing(out / "timing.csv", std::ios::trunc);
  timing << "epoch,seconds\n";

  auto save = [&](std::size_t epoch, const std::string& phase, std::size_t step) {
    json extra{{"epoch", epoch}, {"phase", phase}, {"global_step", step}, {"adam_t", adam.t()}};
    model::save_model(model, checkpoint_dir(out, epoch), extra);
    if (result.checkpoint_epochs.empty() || result.checkpoint_epochs.back() != epoch)
      result.checkpoint_epochs.push_back(epoch);
  };
  save(0, spec.phases.front().name, 0);

  std::size_t epoch = 0, global_step = 0;
  std::vector<std::size_t> segment_pos(segment_steps.size(), 0);
  for (std::size_t p = 0; p < spec.phases.size(); ++p) {
    const auto& phase = spec.phases[p];
    if (phase.reset_optimizer_on_entry) adam.reset();
    const auto active = active_mask(model, phase.alpha);
    const std::size_t seg = segment_of_phase[p];
    for (std::size_t e = 0; e < phase.epochs; ++e) {
      ++epoch;
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<std::uint32_t> order = train_utts;
      Rng shuffle_rng(mix_seed({spec.seed, kShuffle, epoch}));
      std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

      double sum_av = 0, sum_r = 0, sum_d = 0, lr = 0;
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        const std::size_t begin = s * spec.batch_size;
        const std::size_t end = std::min(order.size(), begin + spec.batch_size);
        std::span<const std::uint32_t> batch(order.data() + begin, end - begin);
        ++global_step;
        lr = lr_at(++segment_pos[seg], segment_steps[seg], spec.warmup_fraction, spec.lr0);

        Rng step_rng(mix_seed({spec.seed, kStep, global_step}));
        BatchValues losses;
        try {
          ad::Tape<float> tape;
          const model::ForwardContext ctx{true, &step_rng, {}};
          auto step = batch_loss(tape, model, corpus, batch, phase.alpha, options.loss, ctx, step_rng);
          losses.take(step);
          for (auto& t : tensors) t.zero_grad();
          tape.backward(step.total);
          if (options.monitor_inactive && (phase.alpha == 0.0 || phase.alpha == 1.0)) {
            // The inactive objective on its own stream, without gradients.
            Rng monitor_rng(mix_seed({spec.seed, kMonitor, global_step}));
            auto mtape = ad::Tape<float>::inference();
            const model::ForwardContext mctx{true, &monitor_rng, {}};
            auto mon = batch_loss(mtape, model, corpus, batch, 1.0 - phase.alpha, options.loss, mctx, monitor_rng);
            if (mon.av) losses.av = mon.av->item(), losses.recall1 = mon.recall1;
            if (mon.r) losses.r = mon.r->item(), losses.d = mon.d->item();
          }
          std::vector<std::vector<float>> grads;
          grads.reserve(tensors.size());
          for (const auto& t : tensors) grads.push_back(t.grad());
          adam.step(tensors, grads, lr, active);
        } catch (const NonFiniteError& err) {
          const auto diag = out / ("ckpt_diag_" + std::to_string(epoch) + "_" + std::to_string(global_step));
          model::save_model(model, diag, json{{"epoch", epoch}, {"global_step", global_step}, {"error", err.what()}});
          spdlog::error("non-finite value at epoch {} step {}: {}; diagnostic checkpoint in {}", epoch, global_step,
                        err.what(), diag.string());
          throw;
        }
        sum_av += losses.av;
        sum_r += losses.r;
        sum_d += losses.d;
        if (options.on_step) {
          StepInfo info{epoch, global_step, phase.name, phase.alpha, lr, adam.t(),
                        objectives::make_report<float>(phase.alpha, static_cast<float>(losses.av),
                                                       static_cast<float>(losses.r), static_cast<float>(losses.d),
                                                       options.loss.diversity_weight)};
          info.report.combined = losses.combined;
          info.report.batch_recall1 = losses.recall1;
          info.batch.assign(batch.begin(), batch.end());
          options.on_step(info);
        }
      }
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing << epoch << ',' << num(seconds) << '\n';
      EpochRow row;
      row.epoch = epoch;
      row.phase = phase.name;
      row.alpha = phase.alpha;
      const double n = static_cast<double>(steps_per_epoch);
      row.loss_av = sum_av / n;
      row.loss_aud_r = sum_r / n;
      row.loss_aud_d = sum_d / n;
      row.loss_combined = objectives::combined_value<double>(phase.alpha, row.loss_av, row.loss_aud_r, row.loss_aud_d,
                                                             options.loss.diversity_weight);
      row.lr = lr;
      row.seconds = options.log_wall_clock ? seconds : 0.0;
      result.log.append(row);
      result.log.write_csv(out / "train_log.csv");
      spdlog::info("epoch {} [{}] av={:.4f} aud_r={:.4f} aud_d={:.4f} lr={:.3g} ({:.1f}s)", epoch, phase.name,
                   row.loss_av, row.loss_aud_r, row.loss_aud_d, lr, seconds);
      if (options.on_epoch) options.on_epoch(row);
      const bool boundary = e + 1 == phase.epochs;
      if (epoch % spec.checkpoint_period == 0 || boundary) save(epoch, phase.name, global_step);
    }
  }
  result.model = std::move(model);
  return result;
}

}  // namespace schedlab::trainer
