#include "schedlab/runner/runner.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "schedlab/eval/retrieval.hpp"
#include "schedlab/util/error.hpp"
#include "schedlab/util/hash.hpp"
#include "schedlab/util/json_fields.hpp"

namespace schedlab::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os.flush()) throw IoError("cannot write " + path.string());
}

Artifact file_artifact(const fs::path& path) { return {path, sha256_file(path)}; }

eval::Condition parse_condition(const std::string& s) {
  if (s == "within") return eval::Condition::within;
  if (s == "across") return eval::Condition::across;
  throw InvalidArgument("config key 'eval.conditions': unknown condition '" + s + "' (expected within or across)");
}

void read_adam(const json& j, ad::AdamConfig& a) {
  JsonFields(j, "train.adam")
      .opt("beta1", a.beta1)
      .opt("beta2", a.beta2)
      .opt("eps", a.eps)
      .opt("weight_decay", a.weight_decay)
      .opt("grad_clip", a.grad_clip)
      .finish();
}

void read_train(const json& j, RunConfig& c) {
  JsonFields f(j, "train");
  auto& s = c.schedule;
  f.opt("batch_size", s.batch_size)
      .opt("lr0", s.lr0)
      .opt("warmup_fraction", s.warmup_fraction)
      .opt("checkpoint_period", s.checkpoint_period)
      .opt("restart_lr_on_reset", s.restart_lr_on_reset)
      .opt("monitor_inactive", c.train.monitor_inactive)
      .mark("loss")
      .mark("adam")
      .finish();
  if (j.contains("loss")) {
    try {
      c.train.loss = j.at("loss").get<objectives::LossConfig>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("config key 'train.loss': ") + e.what());
    }
  }
  if (j.contains("adam")) read_adam(j.at("adam"), c.train.adam);
}

void read_eval(const json& j, EvalOptions& e) {
  std::vector<std::string> conditions;
  for (auto c : e.conditions) conditions.emplace_back(eval::condition_name(c));
  JsonFields(j, "eval")
      .opt("layers", e.layers)
      .opt("epochs", e.epochs)
      .opt("k", e.k)
      .opt("conditions", conditions)
      .opt("max_per_cell", e.limits.max_per_cell)
      .opt("max_speaker_pairs", e.limits.max_speaker_pairs)
      .finish();
  e.conditions.clear();
  for (const auto& s : conditions) e.conditions.push_back(parse_condition(s));
}

void validate(const RunConfig& c) {
  c.model.validate();
  c.schedule.validate();
  c.train.loss.validate();
  if (c.model.feat_dim != c.corpus.feat_dim || c.model.image_token_dim != c.corpus.image_token_dim)
    throw InvalidArgument("config key 'model': feat_dim and image_token_dim must match the corpus spec");
  if (c.eval.k.empty()) throw InvalidArgument("config key 'eval.k' must not be empty");
  for (auto k : c.eval.k)
    if (k == 0) throw InvalidArgument("config key 'eval.k': k must be >= 1");
  for (auto l : c.eval.layers)
    if (l < 1 || l > c.model.ssl_layers())
      throw InvalidArgument("config key 'eval.layers': layer " + std::to_string(l) + " outside [1, " +
                            std::to_string(c.model.ssl_layers()) + "]");
  if (c.eval.conditions.empty()) throw InvalidArgument("config key 'eval.conditions' must not be empty");
  if (c.out.empty()) throw InvalidArgument("config key 'out' is required (or pass --out)");
}

void write_run_json(const RunConfig& c, const char* command) {
  fs::create_directories(c.out);
  write_text(c.out / "run.json", json{{"command", command}, {"config", to_json(c)}}.dump(1) + "\n");
}

std::string corpus_identity(const corpus::CorpusSpec& spec, std::uint64_t seed) {
  return json{{"spec", spec}, {"seed", seed}}.dump();
}

corpus::Corpus load_checked(const fs::path& dir, const RunConfig& c) {
  if (!fs::exists(dir / "manifest.json"))
    throw InvalidArgument("no corpus at " + dir.string() + "; run generate-corpus first");
  auto corpus = corpus::load_corpus(dir);
  if (corpus_identity(corpus.spec, corpus.seed) != corpus_identity(c.corpus, c.seed))
    throw InvalidArgument("corpus at " + dir.string() +
                          " was generated from a different spec or seed; rerun generate-corpus");
  return corpus;
}

fs::path checked_run_dir(const RunConfig& c) {
  auto dir = Layout{c.out}.run(c.schedule.variant);
  if (trainer::available_checkpoints(dir).empty())
    throw InvalidArgument("no checkpoints for variant '" + c.schedule.variant + "' under " + dir.string() +
                          "; run train first");
  return dir;
}

std::vector<std::size_t> eval_layers(const RunConfig& c) {
  if (!c.eval.layers.empty()) return c.eval.layers;
  std::vector<std::size_t> all;
  for (std::size_t l = 1; l <= c.model.ssl_layers(); ++l) all.push_back(l);
  return all;
}

std::vector<std::size_t> eval_epochs(const RunConfig& c, const fs::path& run_dir) {
  return c.eval.epochs.empty() ? trainer::available_checkpoints(run_dir) : c.eval.epochs;
}

std::string rel_path(const fs::path& p, const fs::path& root) { return p.lexically_relative(root).generic_string(); }

json artifact_json(const fs::path& path, const fs::path& root) {
  return json{{"path", rel_path(path, root)}, {"sha256", sha256_file(path)}};
}

struct RetrievalCell {
  std::size_t epoch;
  std::string direction;
  std::size_t k;
  double recall;
};

std::vector<RetrievalCell> read_retrieval(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<RetrievalCell> out;
  while (std::getline(is, line)) {
    auto f = split_csv(line);
    if (f.size() != 6) throw IoError("malformed row in " + path.string());
    out.push_back({std::stoul(f[0]), f[1], std::stoul(f[2]), std::stod(f[3])});
  }
  return out;
}

std::vector<eval::AbxRow> read_abx(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<eval::AbxRow> out;
  while (std::getline(is, line)) {
    auto f = split_csv(line);
    if (f.size() != 5) throw IoError("malformed row in " + path.string());
    out.push_back({std::stoul(f[0]), std::stoul(f[1]), parse_condition(f[2]), std::stod(f[3]), std::stoul(f[4])});
  }
  return out;
}

}  // namespace

std::string variant_slug(const std::string& variant) {
  std::string slug;
  bool sep = false;
  for (char c : variant) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      if (sep && !slug.empty()) slug += '_';
      slug += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      sep = false;
    } else if (c == '+') {
      slug += "_plus";
      sep = true;
    } else {
      sep = true;
    }
  }
  if (slug.empty()) throw InvalidArgument("variant name '" + variant + "' has no usable characters");
  return slug;
}

RunConfig resolve_config(const json& raw, const fs::path& base_dir, const Overrides& ov) {
  JsonFields f(raw, "");
  RunConfig c;

  if (!raw.empty()) {
    std::string schema;
    f.req("schema", schema);
    if (schema != kRunSchema)
      throw InvalidArgument("config key 'schema': expected '" + std::string(kRunSchema) + "', got '" + schema + "'");
  }

  std::optional<std::uint64_t> seed;
  if (raw.contains("seed")) {
    std::uint64_t s = 0;
    f.opt("seed", s);
    seed = s;
  }
  if (ov.seed) seed = ov.seed;
  if (!seed) throw InvalidArgument("config key 'seed' is required (or pass --seed)");
  c.seed = *seed;

  f.mark("corpus");
  if (raw.contains("corpus")) {
    const auto& j = raw.at("corpus");
    json spec_json;
    if (j.is_string()) {
      fs::path p = j.get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      if (!fs::exists(p)) throw InvalidArgument("config key 'corpus': file " + p.string() + " does not exist");
      spec_json = read_json_file(p);
    } else {
      spec_json = j;
    }
    try {
      c.corpus = spec_json.get<corpus::CorpusSpec>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("config key 'corpus': ") + e.what());
    }
  }

  f.mark("model");
  if (raw.contains("model") && raw.at("model").is_object()) {
    try {
      c.model = raw.at("model").get<model::ModelConfig>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("config key 'model': ") + e.what());
    }
  } else {
    std::string name = "toy";
    f.opt("model", name);
    c.model = model::preset(name);
    c.model.feat_dim = c.corpus.feat_dim;
    c.model.image_token_dim = c.corpus.image_token_dim;
  }

  std::size_t pretrain = 20, main = 50;
  f.opt("pretrain_epochs", pretrain).opt("main_epochs", main).mark("variant");
  if (ov.variant) {
    c.schedule = trainer::variant_preset(*ov.variant, pretrain, main);
  } else if (raw.contains("variant") && raw.at("variant").is_object()) {
    try {
      c.schedule = raw.at("variant").get<trainer::ScheduleSpec>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("config key 'variant': ") + e.what());
    }
  } else {
    std::string name = "VGS";
    f.opt("variant", name);
    c.schedule = trainer::variant_preset(name, pretrain, main);
  }

  f.mark("train").mark("eval");
  if (raw.contains("train")) read_train(raw.at("train"), c);
  if (raw.contains("eval")) read_eval(raw.at("eval"), c.eval);
  c.schedule.seed = c.seed;

  std::string out;
  f.opt("out", out);
  c.out = out;
  f.finish();

  if (ov.out) c.out = *ov.out;
  if (ov.layers) c.eval.layers = *ov.layers;
  if (ov.epochs) c.eval.epochs = *ov.epochs;
  if (ov.k) c.eval.k = *ov.k;
  validate(c);
  return c;
}

RunConfig load_config(const fs::path& path, const Overrides& overrides) {
  if (path.empty()) return resolve_config(json::object(), fs::current_path(), overrides);
  if (!fs::exists(path)) throw InvalidArgument("config file " + path.string() + " does not exist");
  return resolve_config(read_json_file(path), path.parent_path(), overrides);
}

json to_json(const RunConfig& c) {
  json conditions = json::array();
  for (auto cond : c.eval.conditions) conditions.push_back(eval::condition_name(cond));
  return json{{"schema", kRunSchema},
              {"seed", c.seed},
              {"corpus", c.corpus},
              {"model", c.model},
              {"variant", c.schedule},
              {"train",
               {{"batch_size", c.schedule.batch_size},
                {"lr0", c.schedule.lr0},
                {"warmup_fraction", c.schedule.warmup_fraction},
                {"checkpoint_period", c.schedule.checkpoint_period},
                {"restart_lr_on_reset", c.schedule.restart_lr_on_reset},
                {"monitor_inactive", c.train.monitor_inactive},
                {"loss", c.train.loss},
                {"adam",
                 {{"beta1", c.train.adam.beta1},
                  {"beta2", c.train.adam.beta2},
                  {"eps", c.train.adam.eps},
                  {"weight_decay", c.train.adam.weight_decay},
                  {"grad_clip", c.train.adam.grad_clip}}}}},
              {"eval",
               {{"layers", c.eval.layers},
                {"epochs", c.eval.epochs},
                {"k", c.eval.k},
                {"conditions", conditions},
                {"max_per_cell", c.eval.limits.max_per_cell},
                {"max_speaker_pairs", c.eval.limits.max_speaker_pairs}}},
              {"out", c.out.generic_string()}};
}

std::string checkpoint_hash(const fs::path& dir) {
  Sha256 h;
  for (const char* name : {"model.json", "params.bin"}) {
    if (!fs::exists(dir / name)) throw IoError("checkpoint " + dir.string() + " lacks " + name);
    h.update(std::string_view(name)).update_file(dir / name);
  }
  return h.hex();
}

std::vector<Artifact> cmd_generate(const RunConfig& c) {
  write_run_json(c, "generate-corpus");
  Layout layout{c.out};
  fs::remove_all(layout.corpus());
  corpus::write_corpus_pair(c.corpus, c.seed, layout.corpus());
  spdlog::info("corpus written to {}", layout.corpus().string());
  return {{layout.corpus(), corpus::corpus_hash(layout.corpus())},
          {layout.abx_corpus(), corpus::corpus_hash(layout.abx_corpus())}};
}

std::vector<Artifact> cmd_train(const RunConfig& c) {
  write_run_json(c, "train");
  Layout layout{c.out};
  auto corpus = load_checked(layout.corpus(), c);
  auto dir = layout.run(c.schedule.variant);
  fs::remove_all(dir);

  trainer::TrainOptions opt;
  opt.loss = c.train.loss;
  opt.adam = c.train.adam;
  opt.monitor_inactive = c.train.monitor_inactive;
  opt.run_extra = json{{"run_config", to_json(c)}, {"corpus_sha256", corpus::corpus_hash(layout.corpus())}};
  auto result = trainer::run_schedule(c.schedule, corpus, c.model, dir, opt);

  std::vector<Artifact> out{file_artifact(dir / "run.json"), file_artifact(dir / "train_log.csv")};
  for (auto e : result.checkpoint_epochs) {
    auto ck = trainer::checkpoint_dir(dir, e);
    out.push_back({ck, checkpoint_hash(ck)});
  }
  return out;
}

std::vector<Artifact> cmd_eval_abx(const RunConfig& c) {
  write_run_json(c, "eval-abx");
  Layout layout{c.out};
  auto dir = checked_run_dir(c);
  auto abx = load_checked(layout.abx_corpus(), c);
  eval::AbxOptions opt;
  opt.limits = c.eval.limits;
  opt.seed = c.seed;
  opt.conditions = c.eval.conditions;
  auto layers = eval_layers(c);
  auto epochs = eval_epochs(c, dir);
  auto rows = eval::layer_sweep_abx(dir, abx, layers, epochs, opt);
  write_text(dir / "abx.csv", eval::abx_csv(rows));
  for (const auto& r : eval::best_layers(rows))
    spdlog::info("epoch {} {}: best layer {} error {:.4f}", r.epoch, eval::condition_name(r.condition), r.layer,
                 r.error);
  return {file_artifact(dir / "abx.csv")};
}

std::vector<Artifact> cmd_eval_retrieval(const RunConfig& c) {
  write_run_json(c, "eval-retrieval");
  Layout layout{c.out};
  auto dir = checked_run_dir(c);
  auto corpus = load_checked(layout.corpus(), c);
  auto epochs = eval_epochs(c, dir);
  for (auto e : epochs) (void)trainer::load_checkpoint(dir, e);

  std::ostringstream os;
  os << "epoch,direction,k,recall,n_queries,n_candidates\n";
  for (auto e : epochs) {
    auto model = trainer::load_checkpoint(dir, e);
    auto r = eval::evaluate_retrieval(model, corpus, c.eval.k);
    for (const auto& [k, v] : r.speech_to_image)
      os << e << ",speech_to_image," << k << ',' << num(v) << ',' << r.n_captions << ',' << r.n_images << '\n';
    for (const auto& [k, v] : r.image_to_speech)
      os << e << ",image_to_speech," << k << ',' << num(v) << ',' << r.n_images << ',' << r.n_captions << '\n';
    spdlog::info("epoch {}: speech->image r@{} {:.4f}", e, c.eval.k.back(), r.speech_to_image.at(c.eval.k.back()));
  }
  write_text(dir / "retrieval.csv", os.str());
  return {file_artifact(dir / "retrieval.csv")};
}

std::vector<Artifact> cmd_report(const RunConfig& c) {
  write_run_json(c, "report");
  Layout layout{c.out};
  const fs::path root = c.out;

  std::ostringstream retrieval, retrieval_traj, abx_table, abx_traj, losses;
  retrieval << "variant,selection,epoch,direction,k,recall\n";
  retrieval_traj << "variant,epoch,direction,k,recall\n";
  abx_table << "variant,epoch,condition,best_layer,error\n";
  abx_traj << "variant,epoch,condition,best_layer,error\n";
  losses << "variant," << trainer::TrainLog::kHeader << '\n';

  json variants = json::array();
  for (const auto& name : trainer::variant_names()) {
    auto dir = layout.run(name);
    if (!fs::exists(dir / "train_log.csv")) continue;
    const auto v = csv_field(name);
    json entry{{"variant", name}, {"run_dir", rel_path(dir, root)}};
    auto run = read_json_file(dir / "run.json");
    entry["corpus_sha256"] = run.value("corpus_sha256", "");
    entry["train_log"] = artifact_json(dir / "train_log.csv", root);

    std::map<std::size_t, std::string> ck_hash;
    json cks = json::array();
    for (auto e : trainer::available_checkpoints(dir)) {
      ck_hash[e] = checkpoint_hash(trainer::checkpoint_dir(dir, e));
      cks.push_back({{"epoch", e}, {"path", rel_path(trainer::checkpoint_dir(dir, e), root)}, {"sha256", ck_hash[e]}});
    }
    entry["checkpoints"] = cks;

    auto log = trainer::TrainLog::read_csv(dir / "train_log.csv");
    entry["final_epoch"] = log.rows().empty() ? 0 : log.rows().back().epoch;
    {
      std::ifstream is(dir / "train_log.csv");
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line)) losses << v << ',' << line << '\n';
    }

    entry["retrieval"] = nullptr;
    if (fs::exists(dir / "retrieval.csv")) {
      auto cells = read_retrieval(dir / "retrieval.csv");
      // Final epoch is the headline value; best epoch maximizes s2i recall at the largest k.
      std::size_t last = 0, top_k = 0, best = 0;
      double best_recall = -1.0;
      for (const auto& r : cells) {
        last = std::max(last, r.epoch);
        if (r.direction == "speech_to_image") top_k = std::max(top_k, r.k);
      }
      for (const auto& r : cells)
        if (r.direction == "speech_to_image" && r.k == top_k && r.recall > best_recall) {
          best_recall = r.recall;
          best = r.epoch;
        }
      auto selected = [&](std::size_t epoch) {
        json t{{"epoch", epoch},
               {"checkpoint_sha256", ck_hash.count(epoch) ? ck_hash[epoch] : ""},
               {"speech_to_image", json::object()},
               {"image_to_speech", json::object()}};
        for (const auto& r : cells)
          if (r.epoch == epoch) t[r.direction][std::to_string(r.k)] = r.recall;
        return t;
      };
      for (const auto& r : cells) {
        const auto row = ',' + std::to_string(r.epoch) + ',' + r.direction + ',' + std::to_string(r.k) + ',' +
                         num(r.recall) + '\n';
        retrieval_traj << v << row;
        if (r.epoch == last) retrieval << v << ",final" << row;
        if (r.epoch == best) retrieval << v << ",best" << row;
      }
      entry["retrieval"] = artifact_json(dir / "retrieval.csv", root);
      entry["retrieval"]["final"] = selected(last);
      entry["retrieval"]["best"] = selected(best);
    }

    entry["abx"] = nullptr;
    if (fs::exists(dir / "abx.csv")) {
      auto rows = read_abx(dir / "abx.csv");
      auto best = eval::best_layers(rows);
      std::size_t last = 0;
      for (const auto& r : best) last = std::max(last, r.epoch);
      json table = json::object();
      for (const auto& r : best) {
        abx_traj << v << ',' << r.epoch << ',' << eval::condition_name(r.condition) << ',' << r.layer << ','
                 << num(r.error) << '\n';
        if (r.epoch != last) continue;
        abx_table << v << ',' << r.epoch << ',' << eval::condition_name(r.condition) << ',' << r.layer << ','
                  << num(r.error) << '\n';
        table[eval::condition_name(r.condition)] = {{"best_layer", r.layer}, {"error", r.error}};
      }
      entry["abx"] = artifact_json(dir / "abx.csv", root);
      entry["abx"]["epoch"] = last;
      entry["abx"]["checkpoint_sha256"] = ck_hash.count(last) ? ck_hash[last] : "";
      entry["abx"]["best"] = table;
    }
    variants.push_back(entry);
  }
  if (variants.empty()) throw InvalidArgument("no training runs under " + (root / "runs").string());

  std::vector<Artifact> out;
  json tables = json::object();
  for (const auto& [key, text] : std::vector<std::pair<std::string, std::string>>{
           {"retrieval", retrieval.str()},
           {"retrieval_trajectory", retrieval_traj.str()},
           {"abx", abx_table.str()},
           {"abx_trajectory", abx_traj.str()},
           {"loss_curves", losses.str()}}) {
    auto path = layout.tables() / (key + ".csv");
    write_text(path, text);
    out.push_back(file_artifact(path));
    tables[key] = artifact_json(path, root);
  }

  json corpus_info = nullptr;
  if (fs::exists(layout.corpus() / "manifest.json"))
    corpus_info = {{"path", rel_path(layout.corpus(), root)},
                   {"sha256", corpus::corpus_hash(layout.corpus())},
                   {"abx_path", rel_path(layout.abx_corpus(), root)},
                   {"abx_sha256", corpus::corpus_hash(layout.abx_corpus())}};

  json report{{"schema", kReportSchema},
              {"seed", c.seed},
              {"corpus", corpus_info},
              {"variants", variants},
              {"tables", tables}};
  write_text(layout.report(), report.dump(1) + "\n");
  out.push_back(file_artifact(layout.report()));
  return out;
}

}  // namespace schedlab::runner
