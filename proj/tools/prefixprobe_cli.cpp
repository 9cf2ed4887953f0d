// prefixprobe: search, score, classify, evaluate and benchmark from the shell.
// Exit codes: 0 success, 1 operational error, 2 usage error.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prefixprobe/prefixprobe.hpp"

namespace pp = prefixprobe;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config_path;
  std::string backend_url;
  std::string model_id;
  std::string template_mode;
  std::string prefix_set;
  std::string dataset;
  std::string calibration_split;
  std::string out;
  std::optional<double> tau;
  std::optional<int> top_k, beam_width, max_length, final_per_side, init_per_class;
  std::optional<int> repetitions, concurrency;
};

pp::RunConfig resolve(const Flags& f) {
  pp::RunConfig c;
  if (!f.config_path.empty()) c = pp::load_run_config(f.config_path);
  if (!f.backend_url.empty()) c.backend = f.backend_url;
  if (!f.model_id.empty()) c.model_id = f.model_id;
  if (!f.template_mode.empty()) c.template_mode = pp::template_mode_from_string(f.template_mode);
  if (!f.prefix_set.empty()) c.prefix_set_path = f.prefix_set;
  if (!f.calibration_split.empty()) c.calibration_split = f.calibration_split;
  if (f.tau) c.tau = *f.tau;
  if (f.top_k) c.search.top_k = *f.top_k;
  if (f.beam_width) c.search.beam_width = *f.beam_width;
  if (f.max_length) c.search.max_length = *f.max_length;
  if (f.final_per_side) c.search.final_per_side = *f.final_per_side;
  if (f.init_per_class) c.search.init_per_class = *f.init_per_class;
  if (f.repetitions) c.repetitions = *f.repetitions;
  if (f.concurrency) c.concurrency = *f.concurrency;
  c.validate();
  return c;
}

bool to_stdout(const std::string& path) { return path.empty() || path == "-"; }

void emit(const std::string& path, const std::string& content) {
  if (to_stdout(path)) {
    std::cout << content;
    std::cout.flush();
  } else {
    pp::detail::write_file(path, content);
  }
}

struct Context {
  std::string command;
  Flags flags;
  pp::RunConfig config;

  nlohmann::ordered_json snapshot() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config"] = pp::to_json(config);
    j["dataset"] = flags.dataset;
    return j;
  }

  // Resolved configuration next to a data file, so CSV outputs stay plain.
  void sidecar(const std::string& path) const {
    if (!to_stdout(path)) pp::detail::write_file(path + ".config.json", snapshot().dump(2) + "\n");
  }

  std::shared_ptr<pp::LogProbProvider> provider() const {
    if (config.backend.empty()) throw UsageError("--backend-url is required for " + command);
    return pp::make_provider(config);
  }

  pp::Dataset dataset(const std::string& path, const char* what = "--dataset") const {
    if (path.empty()) throw UsageError(std::string(what) + " is required for " + command);
    auto ds = pp::load_dataset(path, pp::default_warning);
    ds.validate();
    return ds;
  }

  pp::PrefixSet prefix_set() const {
    if (config.prefix_set_path.empty()) {
      throw UsageError("--prefix-set is required for " + command);
    }
    return pp::load_prefix_set(config.prefix_set_path);
  }

  pp::ScoringOptions scoring() const { return {pp::CacheHint::kReuse, config.concurrency}; }
};

void warn_model_mismatch(const pp::PrefixSet& set, const pp::LogProbProvider& p) {
  if (!set.model_id.empty() && set.model_id != p.model_id()) {
    std::cerr << "warning: prefix set was searched on '" << set.model_id
              << "' but the backend reports '" << p.model_id() << "'\n";
  }
}

// Scores every prompt; failed prompts are reported and make the command fail
// after the successful rows are written.
struct Scored {
  std::vector<std::pair<const pp::Prompt*, pp::Decision>> rows;
  std::vector<std::string> errors;
};

Scored score_all(const Context& ctx, const pp::Dataset& ds, double tau) {
  const auto provider = ctx.provider();
  const auto set = ctx.prefix_set();
  warn_model_mismatch(set, *provider);
  Scored out;
  const auto batch = pp::score_batch(*provider, ds.prompts, set, tau, ctx.scoring());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]) {
      out.rows.emplace_back(&ds.prompts[i], *batch[i]);
    } else {
      out.errors.push_back(batch[i].error());
    }
  }
  if (out.rows.empty() && !ds.empty()) throw pp::BackendError("every prompt failed to score");
  return out;
}

int report_errors(const Scored& s) {
  for (const auto& e : s.errors) std::cerr << "error: " << e << '\n';
  return s.errors.empty() ? 0 : 1;
}

std::vector<pp::ScoredLabel> labeled(const Scored& s) {
  std::vector<pp::ScoredLabel> out;
  for (const auto& [prompt, d] : s.rows) {
    if (!prompt->label) throw pp::InvariantError("prompt '" + prompt->id + "' has no label");
    out.push_back({d.score.s, *prompt->label});
  }
  return out;
}

// Reads a CSV written by score/classify, keyed by header names.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const std::string& path) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw pp::FormatError("'" + path + "' has no '" + name + "' column");
  }
};

CsvTable read_csv(const std::string& path) {
  std::istringstream in(pp::detail::read_file(path));
  CsvTable t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (pp::detail::trim(line).empty()) continue;
    auto fields = pp::csv::parse_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw pp::FormatError("'" + path + "' line " + std::to_string(n) + ": expected " +
                            std::to_string(t.header.size()) + " fields");
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw pp::FormatError("'" + path + "' is empty");
  return t;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw pp::FormatError(where + ": '" + s + "' is not a number");
  }
}

// ---------------------------------------------------------------------------

int cmd_search(const Context& ctx) {
  const auto provider = ctx.provider();
  const auto ds = ctx.dataset(ctx.flags.dataset);
  auto cfg = pp::SearchConfig::from_dataset(ds, ctx.config.search);
  cfg.concurrency = ctx.config.concurrency;
  pp::SearchResult result;
  auto set = pp::search_prefix_set(*provider, cfg, &result);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
  const std::string out = to_stdout(ctx.flags.out) ? "prefix_set.json" : ctx.flags.out;
  pp::save_prefix_set(set, out);
  pp::detail::write_file(out + ".layers.csv", pp::layer_report_csv(result));
  ctx.sidecar(out);
  std::cerr << "searched " << result.candidates.size() << " candidates over "
            << result.layers.size() << " layers; wrote " << out << '\n';
  return 0;
}

int cmd_score(const Context& ctx, bool decisions) {
  const auto ds = ctx.dataset(ctx.flags.dataset);
  const auto s = score_all(ctx, ds, ctx.config.tau);
  std::string body(decisions ? pp::kDecisionCsvHeader : pp::kScoreCsvHeader);
  body.push_back('\n');
  for (const auto& [prompt, d] : s.rows) {
    body += decisions ? pp::decision_csv_row(*prompt, d) : pp::score_csv_row(*prompt, d.score);
    body.push_back('\n');
  }
  emit(ctx.flags.out, body);
  ctx.sidecar(ctx.flags.out);
  return report_errors(s);
}

int cmd_calibrate(const Context& ctx) {
  const std::string path =
      ctx.flags.dataset.empty() ? ctx.config.calibration_split : ctx.flags.dataset;
  const auto ds = ctx.dataset(path, "--dataset (or calibration_split)");
  const auto s = score_all(ctx, ds, 0.0);
  const auto cal = pp::calibrate(labeled(s));
  nlohmann::ordered_json j;
  j["tau"] = cal.tau;
  j["f1"] = cal.f1;
  j["n"] = s.rows.size();
  j["calibration_split"] = path;
  j["snapshot"] = ctx.snapshot();
  emit(ctx.flags.out, j.dump(2) + "\n");
  return report_errors(s);
}

int cmd_eval(const Context& ctx, const std::string& decisions_path,
             std::optional<double> upper_f1, bool as_csv) {
  pp::MetricsReport rep;
  int status = 0;
  if (!decisions_path.empty()) {
    const auto labels = ctx.dataset(ctx.flags.dataset);
    const auto table = read_csv(decisions_path);
    const auto id_col = table.column("prompt_id", decisions_path);
    const auto s_col = table.column("s", decisions_path);
    const auto h_col = table.column("harmful", decisions_path);
    std::vector<pp::LabeledDecision> ds;
    for (const auto& row : table.rows) {
      const auto* p = labels.find(row[id_col]);
      if (!p) throw pp::FormatError("prompt '" + row[id_col] + "' is not in the dataset");
      pp::LabeledDecision d;
      d.decision.score.s = parse_double(row[s_col], decisions_path);
      d.decision.harmful = row[h_col] == "1";
      d.decision.tau = ctx.config.tau;
      d.label = p->label;
      ds.push_back(d);
    }
    rep = pp::f1_at_threshold(ds);
  } else {
    const auto ds = ctx.dataset(ctx.flags.dataset);
    const auto s = score_all(ctx, ds, ctx.config.tau);
    std::vector<pp::LabeledDecision> lds;
    for (const auto& [prompt, d] : s.rows) lds.push_back({d, prompt->label});
    rep = pp::f1_at_threshold(lds);
    status = report_errors(s);
  }
  if (upper_f1) rep.rel_score = pp::rel_score(rep.f1, *upper_f1);
  if (as_csv) {
    emit(ctx.flags.out, std::string(pp::kMetricsCsvHeader) + "\n" + pp::metrics_csv_row(rep) + "\n");
    ctx.sidecar(ctx.flags.out);
  } else {
    auto j = pp::to_json(rep);
    j["snapshot"] = ctx.snapshot();
    emit(ctx.flags.out, j.dump(2) + "\n");
  }
  return status;
}

struct BenchFlags {
  std::optional<double> uncached_ms, cached_ms;
  std::optional<std::size_t> prompt_tokens;
  bool by_pairs = false;
  std::size_t limit = 0;
};

int cmd_bench(const Context& ctx, const BenchFlags& b) {
  std::shared_ptr<const pp::LogProbProvider> provider = ctx.provider();
  if (b.uncached_ms || b.cached_ms || b.prompt_tokens) {
    pp::SimulatedLatencyProvider::Model m;
    if (b.uncached_ms) m.uncached_ms_per_token = *b.uncached_ms;
    if (b.cached_ms) m.cached_ms_per_token = *b.cached_ms;
    m.fixed_prompt_tokens = b.prompt_tokens;
    provider = std::make_shared<pp::SimulatedLatencyProvider>(provider, m);
  }
  const auto set = ctx.prefix_set();
  auto ds = ctx.dataset(ctx.flags.dataset);
  if (b.limit > 0 && ds.prompts.size() > b.limit) ds.prompts.resize(b.limit);
  if (b.by_pairs) {
    std::string body = "pairs,c_extra_tokens,overhead_no_cache_s,overhead_cache_s,speedup\n";
    for (const auto& pt :
         pp::overhead_by_pair_count(*provider, ds.prompts, set, ctx.config.repetitions)) {
      body += std::to_string(pt.pairs) + "," + std::to_string(pt.report.c_extra_tokens) + "," +
              pp::overhead_csv_row(pt.report) + "\n";
    }
    emit(ctx.flags.out, body);
    ctx.sidecar(ctx.flags.out);
    return 0;
  }
  const auto rep = pp::measure_overhead(*provider, ds.prompts, set, ctx.config.repetitions);
  if (!rep.cache_distinguishable) {
    std::cerr << "warning: backend did not distinguish cache reuse from bypass\n";
  }
  auto j = pp::to_json(rep);
  j["snapshot"] = ctx.snapshot();
  emit(ctx.flags.out, j.dump(2) + "\n");
  return 0;
}

std::string listing(const pp::PrefixSet& set) {
  std::ostringstream os;
  std::size_t pos = 1;
  for (const auto* list : {&set.agreement, &set.refusal}) {
    for (const auto& p : *list) {
      char delta[32] = "n/a";
      if (p.delta) std::snprintf(delta, sizeof delta, "%+.4f", *p.delta);
      os << pos++ << "\t" << pp::to_string(p.role) << "\tdelta=" << delta
         << "\tlen=" << p.length() << "\t\"" << p.text << "\"\n";
    }
  }
  return os.str();
}

std::set<std::size_t> parse_positions(const std::string& line) {
  std::set<std::size_t> out;
  std::string token;
  std::istringstream in(line);
  while (in >> token) {
    std::istringstream parts(token);
    std::string item;
    while (std::getline(parts, item, ',')) {
      if (item.empty()) continue;
      std::size_t used = 0;
      long v = -1;
      try {
        v = std::stol(item, &used);
      } catch (const std::exception&) {
      }
      if (v < 1 || used != item.size()) throw UsageError("bad position '" + item + "'");
      out.insert(static_cast<std::size_t>(v));
    }
  }
  return out;
}

int cmd_review(const Context& ctx, const std::vector<std::size_t>& drop, bool list_only) {
  const auto set = ctx.prefix_set();
  if (list_only) {
    std::cout << listing(set);
    return 0;
  }
  std::set<std::size_t> positions(drop.begin(), drop.end());
  if (drop.empty()) {
    std::cerr << listing(set) << "positions to drop (blank keeps all): ";
    std::string line;
    std::getline(std::cin, line);
    positions = parse_positions(line);
  }
  auto out = pp::drop_prefixes(set, positions);
  std::vector<std::size_t> dropped(positions.begin(), positions.end());
  out.created_with["review_dropped"] = dropped;
  emit(ctx.flags.out, pp::prefix_set_to_string(out));
  std::cerr << "kept " << out.agreement.size() << " agreement and " << out.refusal.size()
            << " refusal prefixes\n";
  return 0;
}

int cmd_plot(const Context& ctx, const std::string& scores_path, std::size_t bins) {
  std::vector<pp::ScoredLabel> scores;
  if (!scores_path.empty()) {
    const auto table = read_csv(scores_path);
    const auto s_col = table.column("s", scores_path);
    const auto l_col = table.column("label", scores_path);
    for (const auto& row : table.rows) {
      if (row[l_col] != "0" && row[l_col] != "1") {
        throw pp::FormatError("'" + scores_path + "': every row needs a 0/1 label");
      }
      scores.push_back({parse_double(row[s_col], scores_path), row[l_col] == "1" ? 1 : 0});
    }
  } else {
    scores = labeled(score_all(ctx, ctx.dataset(ctx.flags.dataset), 0.0));
  }
  const std::string base = to_stdout(ctx.flags.out) ? "plot" : ctx.flags.out;
  std::string hist = "bin_lo,bin_hi,benign,harmful\n";
  for (const auto& b : pp::class_histogram(scores, bins)) {
    hist += pp::csv::join({pp::csv::format_double(b.lo), pp::csv::format_double(b.hi),
                           std::to_string(b.benign), std::to_string(b.harmful)}) +
            "\n";
  }
  std::string roc = "threshold,fpr,tpr\n";
  for (const auto& p : pp::roc_curve(scores)) {
    roc += pp::csv::join({pp::csv::format_double(p.threshold), pp::csv::format_double(p.fpr),
                          pp::csv::format_double(p.tpr)}) +
           "\n";
  }
  pp::detail::write_file(base + ".hist.csv", hist);
  pp::detail::write_file(base + ".roc.csv", roc);
  ctx.sidecar(base);
  std::cerr << "wrote " << base << ".hist.csv and " << base << ".roc.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Detect harmful prompts by probing refusal and agreement openings"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.set_version_flag("--version", "prefixprobe 0.1.0");

  Flags f;
  app.add_option("--config", f.config_path, "JSON run config; flags override it")
      ->check(CLI::ExistingFile);
  app.add_option("--backend-url", f.backend_url,
                 "http://host:port endpoint, or toy:<model.json> for the local n-gram model");
  app.add_option("--model-id", f.model_id, "model name sent to the backend");
  app.add_option("--template", f.template_mode, "prompt templating: raw or chat")
      ->check(CLI::IsMember({"raw", "chat"}));
  app.add_option("--prefix-set", f.prefix_set, "prefix set JSON");
  app.add_option("--dataset", f.dataset, "prompts as JSONL or CSV");
  app.add_option("--calibration-split", f.calibration_split, "held-out dataset for calibrate");
  app.add_option("--tau", f.tau, "decision threshold");
  app.add_option("--top-k", f.top_k, "tokens proposed per beam entry");
  app.add_option("--beam-width", f.beam_width, "beam entries kept per layer");
  app.add_option("--max-length", f.max_length, "longest prefix searched, in tokens");
  app.add_option("--final-per-side", f.final_per_side, "prefixes kept per role");
  app.add_option("--init-per-class", f.init_per_class, "search prompts taken per label");
  app.add_option("--repetitions", f.repetitions, "timed passes per cache mode");
  app.add_option("--concurrency", f.concurrency, "probes in flight");
  app.add_option("--out", f.out, "output path ('-' or absent: stdout where applicable)");

  auto* search = app.add_subcommand("search", "discover a prefix set on an init dataset");
  auto* score = app.add_subcommand("score", "write harmfulness scores as CSV");
  auto* classify = app.add_subcommand("classify", "write thresholded decisions as CSV");
  auto* calibrate = app.add_subcommand("calibrate", "choose tau on a held-out split");

  auto* eval = app.add_subcommand("eval", "precision, recall, F1 and AUC");
  std::string decisions_path;
  std::optional<double> upper_f1;
  bool eval_csv = false;
  eval->add_option("--decisions", decisions_path, "decision CSV from classify")
      ->check(CLI::ExistingFile);
  eval->add_option("--upper-f1", upper_f1, "reference F1 for the relative score");
  eval->add_flag("--csv", eval_csv, "emit a CSV row instead of JSON");

  auto* bench = app.add_subcommand("bench", "detection overhead with and without cache reuse");
  BenchFlags bf;
  bench->add_option("--simulate-uncached-ms", bf.uncached_ms, "simulated ms per uncached token");
  bench->add_option("--simulate-cached-ms", bf.cached_ms, "simulated ms per cached token");
  bench->add_option("--simulate-prompt-tokens", bf.prompt_tokens, "simulated prompt length");
  bench->add_flag("--by-pairs", bf.by_pairs, "overhead for the first 1..n prefix pairs");
  bench->add_option("--limit", bf.limit, "use at most this many prompts");

  auto* review = app.add_subcommand("review", "drop prefixes from a set by listing position");
  std::vector<std::size_t> drop;
  bool list_only = false;
  review->add_option("--drop", drop, "1-based positions to drop")->delimiter(',');
  review->add_flag("--list", list_only, "print the numbered listing and exit");

  auto* plot = app.add_subcommand("plot-data", "histogram and ROC data as CSV");
  std::string scores_path;
  std::size_t bins = 20;
  plot->add_option("--scores", scores_path, "score CSV from the score command")
      ->check(CLI::ExistingFile);
  plot->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.flags = f;
    ctx.command = app.get_subcommands().front()->get_name();
    ctx.config = resolve(f);
    if (search->parsed()) return cmd_search(ctx);
    if (score->parsed()) return cmd_score(ctx, false);
    if (classify->parsed()) return cmd_score(ctx, true);
    if (calibrate->parsed()) return cmd_calibrate(ctx);
    if (eval->parsed()) return cmd_eval(ctx, decisions_path, upper_f1, eval_csv);
    if (bench->parsed()) return cmd_bench(ctx, bf);
    if (review->parsed()) return cmd_review(ctx, drop, list_only);
    if (plot->parsed()) return cmd_plot(ctx, scores_path, bins);
    throw UsageError("unknown subcommand");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nrun with --help for options\n";
    return 2;
  } catch (const pp::InvalidTokenError& e) {
    std::cerr << "invalid token: " << e.what() << '\n';
  } catch (const pp::TransportError& e) {
    std::cerr << "backend unreachable: " << e.what() << '\n';
  } catch (const pp::BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
  } catch (const pp::FormatError& e) {
    std::cerr << "bad input: " << e.what() << '\n';
  } catch (const pp::InvariantError& e) {
    std::cerr << "invalid: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return 1;
}
