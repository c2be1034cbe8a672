#include "tokenlabel/runspec.hpp"

#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tokenlabel/error.hpp"

namespace tokenlabel {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_file(const fs::path& file, const char* what) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ParseError(std::string("cannot open ") + what + " " + file.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(what + " is not valid JSON: " + e.what());
  }
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  const std::set<std::string> known(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key)) throw ParseError(where + ": unknown field \"" + key + "\"");
  }
}

template <typename T>
T get_field(const json& obj, const char* key, T fallback, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": field \"" + key + "\" has the wrong type");
  }
}

fs::path resolve(const fs::path& base_dir, const fs::path& p) {
  return p.is_absolute() ? p : (base_dir / p).lexically_normal();
}

AgreementSpec agreement_from_json(const json& doc, const std::string& where) {
  if (!doc.is_object()) throw ParseError(where + " must be an object");
  reject_unknown_keys(doc, {"schema", "epsilon", "identity", "seed", "rules", "noise", "prior"},
                      where);
  if (get_field<int>(doc, "schema", kRunSpecSchema, where) != kRunSpecSchema) {
    throw ParseError(where + ": unsupported schema version");
  }
  AgreementSpec spec;
  spec.epsilon = get_field<double>(doc, "epsilon", spec.epsilon, where);
  if (!(spec.epsilon > 0.0 && spec.epsilon < 0.5)) {
    throw ParseError(where + ": epsilon must lie in (0, 0.5)");
  }
  spec.identity = get_field<bool>(doc, "identity", spec.identity, where);
  spec.seed = get_field<std::uint64_t>(doc, "seed", spec.seed, where);
  using Rules = std::map<std::string, std::vector<std::string>>;
  using Weights = std::map<std::string, double>;
  spec.rules = get_field<Rules>(doc, "rules", {}, where);
  spec.noise = get_field<Weights>(doc, "noise", {}, where);
  spec.prior_weights = get_field<Weights>(doc, "prior", {}, where);
  return spec;
}

TrainConfig train_from_json(const json& doc) {
  const std::string where = "train";
  if (!doc.is_object()) throw ParseError("\"train\" must be an object");
  reject_unknown_keys(doc,
                      {"batch_size", "epochs", "learning_rate", "lambda_ent", "lambda_kl",
                       "optimizer", "sampler", "balance_odd_batches", "seed", "p_threshold",
                       "patience", "top_k", "init", "max_steps"},
                      where);
  TrainConfig c;
  c.batch_size = get_field<std::size_t>(doc, "batch_size", c.batch_size, where);
  c.epochs = get_field<std::size_t>(doc, "epochs", c.epochs, where);
  c.learning_rate = get_field<double>(doc, "learning_rate", c.learning_rate, where);
  c.weights.lambda_ent = get_field<double>(doc, "lambda_ent", c.weights.lambda_ent, where);
  c.weights.lambda_kl = get_field<double>(doc, "lambda_kl", c.weights.lambda_kl, where);
  c.seed = get_field<std::uint64_t>(doc, "seed", c.seed, where);
  c.balance_odd_batches =
      get_field<bool>(doc, "balance_odd_batches", c.balance_odd_batches, where);
  c.convergence.p_threshold =
      get_field<double>(doc, "p_threshold", c.convergence.p_threshold, where);
  c.convergence.patience = get_field<std::size_t>(doc, "patience", c.convergence.patience, where);
  c.top_k = get_field<std::size_t>(doc, "top_k", c.top_k, where);
  c.max_steps = get_field<std::size_t>(doc, "max_steps", c.max_steps, where);

  const auto optimizer = get_field<std::string>(doc, "optimizer", "adam", where);
  if (optimizer == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else if (optimizer == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else {
    throw ParseError("train: optimizer must be \"adam\" or \"sgd\"");
  }
  const auto sampler = get_field<std::string>(doc, "sampler", "balanced", where);
  if (sampler == "balanced") {
    c.sampler = SamplerMode::balanced;
  } else if (sampler == "stratified") {
    c.sampler = SamplerMode::stratified;
  } else {
    throw ParseError("train: sampler must be \"balanced\" or \"stratified\"");
  }
  const auto init = get_field<std::string>(doc, "init", "zeros", where);
  if (init == "zeros") {
    c.init = LabelInit::zeros;
  } else if (init == "gaussian") {
    c.init = LabelInit::gaussian;
  } else {
    throw ParseError("train: init must be \"zeros\" or \"gaussian\"");
  }
  return c;
}

ordered_json train_to_json(const TrainConfig& c) {
  ordered_json doc;
  doc["batch_size"] = c.batch_size;
  doc["epochs"] = c.epochs;
  doc["learning_rate"] = c.learning_rate;
  doc["lambda_ent"] = c.weights.lambda_ent;
  doc["lambda_kl"] = c.weights.lambda_kl;
  doc["optimizer"] = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  doc["sampler"] = c.sampler == SamplerMode::balanced ? "balanced" : "stratified";
  doc["balance_odd_batches"] = c.balance_odd_batches;
  doc["seed"] = c.seed;
  doc["p_threshold"] = c.convergence.p_threshold;
  doc["patience"] = c.convergence.patience;
  doc["top_k"] = c.top_k;
  doc["init"] = c.init == LabelInit::zeros ? "zeros" : "gaussian";
  doc["max_steps"] = c.max_steps;
  return doc;
}

// Loads the agreement spec named by an evaluator block: either a path
// (relative to the run spec) or an inline object.
std::pair<fs::path, AgreementSpec> agreement_of(const json& block, const fs::path& base_dir) {
  auto it = block.find("agreement");
  if (it == block.end()) throw ParseError("evaluator: missing \"agreement\"");
  if (it->is_string()) {
    const fs::path file = resolve(base_dir, it->get<std::string>());
    return {file, load_agreement_spec(file)};
  }
  return {{}, agreement_from_json(*it, "evaluator.agreement")};
}

EvaluatorSpec evaluator_from_json(const json& block, const fs::path& base_dir) {
  if (!block.is_object()) throw ParseError("\"evaluator\" must be an object");
  const auto type = get_field<std::string>(block, "type", "", "evaluator");
  if (type == "oracle") {
    reject_unknown_keys(block, {"type", "agreement"}, "evaluator");
    auto [file, agreement] = agreement_of(block, base_dir);
    return OracleEvaluatorSpec{file, std::move(agreement)};
  }
  if (type == "similarity") {
    reject_unknown_keys(block,
                        {"type", "agreement", "d_model", "sharpness", "bias", "context_noise",
                         "seed"},
                        "evaluator");
    auto [file, agreement] = agreement_of(block, base_dir);
    SimilarityParams params;
    params.d_model = get_field<std::size_t>(block, "d_model", params.d_model, "evaluator");
    params.sharpness = get_field<double>(block, "sharpness", params.sharpness, "evaluator");
    params.bias = get_field<double>(block, "bias", params.bias, "evaluator");
    params.context_noise =
        get_field<double>(block, "context_noise", params.context_noise, "evaluator");
    params.seed = get_field<std::uint64_t>(block, "seed", params.seed, "evaluator");
    return SimilarityEvaluatorSpec{file, std::move(agreement), params};
  }
  if (type == "external") {
    reject_unknown_keys(block, {"type", "address", "label_top_n", "send_vocab", "gradients"},
                        "evaluator");
    ExternalEvaluatorSpec spec;
    spec.address = get_field<std::string>(block, "address", "", "evaluator");
    spec.options.label_top_n =
        get_field<std::size_t>(block, "label_top_n", spec.options.label_top_n, "evaluator");
    spec.options.send_vocab =
        get_field<bool>(block, "send_vocab", spec.options.send_vocab, "evaluator");
    spec.options.gradients = get_field<bool>(block, "gradients", spec.options.gradients, "evaluator");
    return spec;
  }
  throw ParseError("evaluator: type must be \"oracle\", \"similarity\" or \"external\"");
}

const AgreementSpec* agreement_in(const EvaluatorSpec& spec) {
  if (auto* o = std::get_if<OracleEvaluatorSpec>(&spec)) return &o->agreement;
  if (auto* s = std::get_if<SimilarityEvaluatorSpec>(&spec)) return &s->agreement;
  return nullptr;
}

std::string effective_address(const ExternalEvaluatorSpec& spec) {
  if (const char* env = std::getenv(kEvaluatorAddressEnv); env && *env) return env;
  return spec.address;
}

}  // namespace

RunSpec parse_run_spec(const std::string& text, const fs::path& base_dir) {
  const json doc = parse_json(text, "run spec");
  if (!doc.is_object()) throw ParseError("run spec must be a JSON object");
  reject_unknown_keys(doc,
                      {"schema", "name", "description", "dataset", "labels", "evaluator", "train",
                       "output_dir"},
                      "run spec");
  if (get_field<int>(doc, "schema", 0, "run spec") != kRunSpecSchema) {
    throw ParseError("run spec: \"schema\" must be " + std::to_string(kRunSpecSchema));
  }
  RunSpec spec;
  spec.name = get_field<std::string>(doc, "name", "run", "run spec");
  const auto dataset = get_field<std::string>(doc, "dataset", "", "run spec");
  if (dataset.empty()) throw ParseError("run spec: missing \"dataset\"");
  spec.dataset = resolve(base_dir, dataset);
  spec.labels = get_field<std::vector<std::string>>(doc, "labels", {}, "run spec");
  if (!doc.contains("evaluator")) throw ParseError("run spec: missing \"evaluator\"");
  spec.evaluator = evaluator_from_json(doc["evaluator"], base_dir);
  spec.train = train_from_json(doc.value("train", json::object()));
  const auto out = get_field<std::string>(doc, "output_dir", "", "run spec");
  spec.output_dir = out.empty() ? fs::path("runs") / spec.name : resolve(base_dir, out);
  return spec;
}

RunSpec load_run_spec(const fs::path& spec_file) {
  RunSpec spec = parse_run_spec(read_file(spec_file, "run spec"), spec_file.parent_path());
  spec.source = spec_file;
  return spec;
}

AgreementSpec parse_agreement_spec(const std::string& text) {
  return agreement_from_json(parse_json(text, "agreement spec"), "agreement spec");
}

AgreementSpec load_agreement_spec(const fs::path& file) {
  try {
    return parse_agreement_spec(read_file(file, "agreement spec"));
  } catch (const ParseError& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

std::string evaluator_type(const EvaluatorSpec& spec) {
  switch (spec.index()) {
    case 0: return "oracle";
    case 1: return "similarity";
    default: return "external";
  }
}

Corpus load_run_corpus(const RunSpec& spec) {
  if (!fs::exists(spec.dataset)) throw ParseError("dataset not found: " + spec.dataset.string());
  return load_corpus(spec.dataset, spec.labels);
}

std::unique_ptr<Evaluator> make_evaluator(const RunSpec& spec, const Corpus& corpus) {
  if (const auto* o = std::get_if<OracleEvaluatorSpec>(&spec.evaluator)) {
    return std::make_unique<OracleEvaluator>(
        corpus, expand_agreement(o->agreement, corpus),
        prior_from_weights(o->agreement.prior_weights, corpus.vocab()));
  }
  if (const auto* s = std::get_if<SimilarityEvaluatorSpec>(&spec.evaluator)) {
    return std::make_unique<SimilarityEvaluator>(SimilarityEvaluator::clustered(
        corpus, expand_agreement(s->agreement, corpus), s->params,
        prior_from_weights(s->agreement.prior_weights, corpus.vocab())));
  }
  const auto& e = std::get<ExternalEvaluatorSpec>(spec.evaluator);
  const std::string address = effective_address(e);
  if (address.empty()) throw TransportError("external evaluator has no address");
  return std::make_unique<ExternalEvaluator>(connect_transport(address), corpus, e.options);
}

std::string ValidationReport::text() const {
  if (ok()) return "OK";
  std::string out;
  for (const auto& f : findings) out += f + "\n";
  return out;
}

ValidationReport validate_run_spec(const fs::path& spec_file) {
  ValidationReport report;
  RunSpec spec;
  try {
    spec = load_run_spec(spec_file);
  } catch (const std::exception& e) {
    report.findings.push_back(e.what());
    return report;
  }
  for (const auto& problem : config_problems(spec.train)) {
    report.findings.push_back("config: " + problem);
  }
  std::optional<Corpus> corpus;
  try {
    corpus.emplace(load_run_corpus(spec));
  } catch (const std::exception& e) {
    report.findings.push_back(std::string("dataset: ") + e.what());
  }
  if (corpus) {
    if (corpus->vocab().size() < 2) report.findings.push_back("dataset: vocabulary needs >= 2 tokens");
    if (const AgreementSpec* agreement = agreement_in(spec.evaluator)) {
      for (const auto& token : unknown_tokens(*agreement, corpus->vocab())) {
        report.findings.push_back("agreement: token \"" + token + "\" is not in the vocabulary");
      }
    }
  }
  if (const auto* e = std::get_if<ExternalEvaluatorSpec>(&spec.evaluator)) {
    const std::string address = effective_address(*e);
    const bool shaped = address.starts_with("stdio:") || address.find(':') != std::string::npos;
    if (address.empty() || !shaped) {
      report.findings.push_back("evaluator: address must be tcp://host:port or stdio:<command>");
    }
    if (e->options.label_top_n == 0) report.findings.push_back("evaluator: label_top_n must be >= 1");
  }
  if (const auto* s = std::get_if<SimilarityEvaluatorSpec>(&spec.evaluator)) {
    if (s->params.d_model == 0) report.findings.push_back("evaluator: d_model must be >= 1");
    if (!(s->params.sharpness > 0.0)) report.findings.push_back("evaluator: sharpness must be > 0");
  }
  return report;
}

void apply_overrides(RunSpec& spec, const RunOverrides& overrides) {
  if (overrides.seed) spec.train.seed = *overrides.seed;
  if (overrides.output_dir) spec.output_dir = *overrides.output_dir;
  if (overrides.top_k) spec.train.top_k = *overrides.top_k;
}

std::string file_sha256(const fs::path& file) {
  const std::string bytes = read_file(file, "file");
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

namespace {

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
}

ordered_json manifest_json(const RunSpec& spec, const Corpus& corpus, const TrainResult& result) {
  ordered_json doc;
  doc["schema"] = kRunSpecSchema;
  doc["name"] = spec.name;
  doc["spec_file"] = spec.source.string();
  doc["dataset"] = spec.dataset.string();
  doc["dataset_sha256"] = file_sha256(spec.dataset);
  doc["vocab_size"] = corpus.vocab().size();
  doc["corpus_tokens"] = corpus.token_count();
  doc["evaluator"] = evaluator_type(spec.evaluator);
  doc["seed"] = spec.train.seed;
  doc["config"] = train_to_json(spec.train);
  doc["steps"] = result.trajectory.size();
  doc["stop_reason"] = stop_reason_name(result.stop_reason);
  if (!result.error.empty()) doc["error"] = result.error;
  if (!result.state.logits.empty()) {
    const ProbDist p = softmax_label(result.state);
    const auto top = top_k(p, 1).front();
    doc["final"] = {{"argmax", corpus.vocab().token(top.first)},
                    {"p_max", top.second},
                    {"entropy", entropy_of(p)}};
  }
  return doc;
}

}  // namespace

RunOutcome execute_run(const RunSpec& spec, std::ostream& log) {
  const Corpus corpus = load_run_corpus(spec);
  const auto evaluator = make_evaluator(spec, corpus);
  RunOutcome outcome;
  outcome.output_dir = spec.output_dir;
  outcome.result = train(corpus, *evaluator, spec.train);

  fs::create_directories(spec.output_dir);
  {
    std::ostringstream jsonl;
    write_trajectory_jsonl(jsonl, outcome.result.trajectory);
    write_text(spec.output_dir / "trajectory.jsonl", jsonl.str());
    std::ostringstream csv;
    write_trajectory_csv(csv, outcome.result.trajectory);
    write_text(spec.output_dir / "trajectory.csv", csv.str());
    write_text(spec.output_dir / "manifest.json",
               manifest_json(spec, corpus, outcome.result).dump(2) + "\n");
  }

  const auto& r = outcome.result;
  log << spec.name << ": " << stop_reason_name(r.stop_reason) << " after " << r.trajectory.size()
      << " steps";
  if (!r.trajectory.empty()) {
    log << ", argmax \"" << r.trajectory.back().argmax_token << "\" p=" << r.trajectory.back().p_max;
  }
  log << "\n";
  if (r.stop_reason == StopReason::evaluator_error) log << "error: " << r.error << "\n";

  switch (r.stop_reason) {
    case StopReason::converged: outcome.exit_code = kExitConverged; break;
    case StopReason::completed: outcome.exit_code = kExitNotConverged; break;
    case StopReason::evaluator_error: outcome.exit_code = kExitError; break;
  }
  return outcome;
}

int run_command(const fs::path& spec_file, const RunOverrides& overrides, std::ostream& log) {
  try {
    RunSpec spec = load_run_spec(spec_file);
    apply_overrides(spec, overrides);
    return execute_run(spec, log).exit_code;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitError;
  }
}

SweepPlan load_sweep_plan(const fs::path& grid_file) {
  const json doc = parse_json(read_file(grid_file, "sweep grid"), "sweep grid");
  const std::string where = "sweep grid";
  if (!doc.is_object()) throw ParseError("sweep grid must be a JSON object");
  reject_unknown_keys(doc,
                      {"schema", "learning_rate", "lambda_ent", "lambda_kl", "batch_size",
                       "acceptance", "stop_at_first_accepted"},
                      where);
  SweepPlan plan;
  plan.grid.learning_rates = get_field<std::vector<double>>(doc, "learning_rate", {}, where);
  plan.grid.lambda_ents = get_field<std::vector<double>>(doc, "lambda_ent", {}, where);
  plan.grid.lambda_kls = get_field<std::vector<double>>(doc, "lambda_kl", {}, where);
  plan.grid.batch_sizes = get_field<std::vector<std::size_t>>(doc, "batch_size", {}, where);
  plan.options.stop_at_first_accepted =
      get_field<bool>(doc, "stop_at_first_accepted", plan.options.stop_at_first_accepted, where);
  if (auto it = doc.find("acceptance"); it != doc.end()) {
    reject_unknown_keys(*it, {"entropy_max", "acc_max"}, "sweep grid acceptance");
    plan.acceptance.entropy_max =
        get_field<double>(*it, "entropy_max", plan.acceptance.entropy_max, where);
    plan.acceptance.acc_max = get_field<double>(*it, "acc_max", plan.acceptance.acc_max, where);
  }
  return plan;
}

int sweep_command(const fs::path& spec_file, const fs::path& grid_file,
                  const RunOverrides& overrides, std::ostream& log) {
  try {
    RunSpec spec = load_run_spec(spec_file);
    apply_overrides(spec, overrides);
    const SweepPlan plan = load_sweep_plan(grid_file);
    const Corpus corpus = load_run_corpus(spec);
    const auto evaluator = make_evaluator(spec, corpus);
    const SweepReport report =
        sweep(corpus, *evaluator, spec.train, plan.grid, plan.acceptance, plan.options);

    ordered_json doc;
    doc["schema"] = kRunSpecSchema;
    doc["spec_file"] = spec_file.string();
    doc["any_accepted"] = report.any_accepted;
    doc["best"] = report.best;
    doc["rows"] = ordered_json::array();
    std::ostringstream csv;
    csv << "rank,grid_index,learning_rate,lambda_ent,lambda_kl,batch_size,stop_reason,converged,"
           "accepted,final_acc,final_entropy,argmax,p_max,steps\n";
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
      const auto& row = report.rows[i];
      ordered_json r;
      r["rank"] = i;
      r["grid_index"] = row.grid_index;
      r["config"] = train_to_json(row.config);
      r["stop_reason"] = stop_reason_name(row.stop_reason);
      r["converged"] = row.converged;
      r["accepted"] = row.accepted;
      r["final_acc"] = row.final_acc;
      r["final_entropy"] = row.final_entropy;
      r["argmax"] = row.argmax_token;
      r["p_max"] = row.p_max;
      r["steps"] = row.steps;
      if (!row.problem.empty()) r["problem"] = row.problem;
      doc["rows"].push_back(std::move(r));
      csv << i << ',' << row.grid_index << ',' << row.config.learning_rate << ','
          << row.config.weights.lambda_ent << ',' << row.config.weights.lambda_kl << ','
          << row.config.batch_size << ',' << stop_reason_name(row.stop_reason) << ','
          << row.converged << ',' << row.accepted << ',' << row.final_acc << ','
          << row.final_entropy << ",\"" << row.argmax_token << "\"," << row.p_max << ','
          << row.steps << '\n';
    }
    fs::create_directories(spec.output_dir);
    write_text(spec.output_dir / "sweep_report.json", doc.dump(2) + "\n");
    write_text(spec.output_dir / "sweep_report.csv", csv.str());

    const auto& best = report.rows[report.best];
    log << spec.name << ": " << report.rows.size() << " configurations, "
        << (report.any_accepted ? "accepted" : "none accepted") << "; best lr="
        << best.config.learning_rate << " lambda_ent=" << best.config.weights.lambda_ent
        << " lambda_kl=" << best.config.weights.lambda_kl
        << " batch=" << best.config.batch_size << " -> \"" << best.argmax_token << "\"\n";
    return report.any_accepted ? kExitConverged : kExitNotConverged;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace tokenlabel
