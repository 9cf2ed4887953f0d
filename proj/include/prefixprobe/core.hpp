#pragma once

// Domain types shared by every module: prompts, datasets, prefixes, prefix
// sets and the run configuration, plus their on-disk formats.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixprobe/csv.hpp"
#include "prefixprobe/error.hpp"

namespace prefixprobe {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr std::string_view kPrefixSetSchema = "prefix_set_v1";

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(first, last - first + 1);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("write failed: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prompt / Dataset

struct Prompt {
  std::string id;
  std::string text;
  std::optional<int> label;  // 1 = harmful, 0 = benign

  bool harmful() const { return label.value_or(0) == 1; }

  void validate() const {
    if (detail::trim(text).empty()) {
      throw InvariantError("prompt '" + id + "' has empty text");
    }
    if (label && *label != 0 && *label != 1) {
      throw InvariantError("prompt '" + id + "' label must be 0 or 1");
    }
  }

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

struct Dataset {
  std::string name;
  std::vector<Prompt> prompts;

  std::size_t size() const { return prompts.size(); }
  bool empty() const { return prompts.empty(); }

  const Prompt* find(std::string_view id) const {
    for (const auto& p : prompts) {
      if (p.id == id) return &p;
    }
    return nullptr;
  }

  // Prompts with the given label, in dataset order, at most `limit`.
  std::vector<Prompt> with_label(int label,
                                 std::size_t limit = SIZE_MAX) const {
    std::vector<Prompt> out;
    for (const auto& p : prompts) {
      if (out.size() >= limit) break;
      if (p.label && *p.label == label) out.push_back(p);
    }
    return out;
  }

  void validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& p : prompts) {
      p.validate();
      if (!seen.insert(p.id).second) {
        throw InvariantError("duplicate prompt id '" + p.id + "'");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class DatasetFormat { kJsonl, kCsv };

using WarningHandler = std::function<void(const std::string&)>;

inline void default_warning(const std::string& message) {
  std::clog << "warning: " << message << '\n';
}

inline DatasetFormat dataset_format_from_path(std::string_view path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    return DatasetFormat::kCsv;
  }
  return DatasetFormat::kJsonl;
}

namespace detail {

inline std::optional<int> parse_label_value(const nlohmann::json& v,
                                            std::size_t line_no) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_number_integer()) {
    throw FormatError("line " + std::to_string(line_no) +
                      ": label must be the integer 0 or 1");
  }
  const auto label = v.get<long long>();
  if (label != 0 && label != 1) {
    throw FormatError("line " + std::to_string(line_no) + ": label " +
                      std::to_string(label) + " outside {0,1}");
  }
  return static_cast<int>(label);
}

inline std::optional<int> parse_label_field(std::string_view field,
                                            std::size_t line_no) {
  const auto t = trim(field);
  if (t.empty()) return std::nullopt;
  if (t == "0") return 0;
  if (t == "1") return 1;
  throw FormatError("line " + std::to_string(line_no) + ": label '" +
                    std::string(t) + "' outside {0,1}");
}

// Appends one record; ids default to the record's 0-based position.
inline void add_record(Dataset& ds, std::unordered_set<std::string>& ids,
                       std::optional<std::string> id, std::string text,
                       std::optional<int> label, std::size_t line_no) {
  Prompt p;
  p.id = id ? std::move(*id) : std::to_string(ds.prompts.size());
  p.text = std::move(text);
  p.label = label;
  if (trim(p.text).empty()) {
    throw FormatError("line " + std::to_string(line_no) + ": empty text");
  }
  if (!ids.insert(p.id).second) {
    throw FormatError("line " + std::to_string(line_no) +
                      ": duplicate id '" + p.id + "'");
  }
  ds.prompts.push_back(std::move(p));
}

}  // namespace detail

inline Dataset parse_dataset(std::string_view content, DatasetFormat format,
                             std::string name = {},
                             const WarningHandler& warn = default_warning) {
  Dataset ds;
  ds.name = std::move(name);
  std::unordered_set<std::string> ids;
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t line_no = 0;

  if (format == DatasetFormat::kJsonl) {
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty()) continue;
      nlohmann::json rec;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("line " + std::to_string(line_no) +
                          ": malformed JSON (" + e.what() + ")");
      }
      if (!rec.is_object() || !rec.contains("text") ||
          !rec["text"].is_string()) {
        throw FormatError("line " + std::to_string(line_no) +
                          ": record needs a string field \"text\"");
      }
      std::optional<std::string> id;
      if (rec.contains("id") && !rec["id"].is_null()) {
        if (rec["id"].is_string()) {
          id = rec["id"].get<std::string>();
        } else if (rec["id"].is_number_integer()) {
          id = std::to_string(rec["id"].get<long long>());
        } else {
          throw FormatError("line " + std::to_string(line_no) +
                            ": id must be a string or integer");
        }
      }
      std::optional<int> label;
      if (rec.contains("label")) {
        label = detail::parse_label_value(rec["label"], line_no);
      }
      detail::add_record(ds, ids, std::move(id), rec["text"].get<std::string>(),
                         label, line_no);
    }
  } else {
    std::vector<std::string> header;
    int text_col = -1, label_col = -1, id_col = -1;
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty()) continue;
      std::vector<std::string> fields;
      try {
        fields = csv::parse_line(line);
      } catch (const FormatError& e) {
        throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
      }
      if (header.empty()) {
        header = fields;
        for (std::size_t i = 0; i < header.size(); ++i) {
          const auto h = detail::trim(header[i]);
          if (h == "text") text_col = static_cast<int>(i);
          if (h == "label") label_col = static_cast<int>(i);
          if (h == "id") id_col = static_cast<int>(i);
        }
        if (text_col < 0) {
          throw FormatError("line " + std::to_string(line_no) +
                            ": CSV header must contain a 'text' column");
        }
        continue;
      }
      if (fields.size() != header.size()) {
        throw FormatError("line " + std::to_string(line_no) + ": expected " +
                          std::to_string(header.size()) + " fields, got " +
                          std::to_string(fields.size()));
      }
      std::optional<std::string> id;
      if (id_col >= 0 && !detail::trim(fields[id_col]).empty()) {
        id = fields[id_col];
      }
      std::optional<int> label;
      if (label_col >= 0) {
        label = detail::parse_label_field(fields[label_col], line_no);
      }
      detail::add_record(ds, ids, std::move(id), fields[text_col], label,
                         line_no);
    }
  }
  if (ds.prompts.empty() && warn) warn("dataset '" + ds.name + "' is empty");
  return ds;
}

inline Dataset load_dataset(const std::string& path, DatasetFormat format,
                            const WarningHandler& warn = default_warning) {
  return parse_dataset(detail::read_file(path), format, path, warn);
}

inline Dataset load_dataset(const std::string& path,
                            const WarningHandler& warn = default_warning) {
  return load_dataset(path, dataset_format_from_path(path), warn);
}

inline std::string dataset_to_jsonl(const Dataset& ds) {
  std::string out;
  for (const auto& p : ds.prompts) {
    nlohmann::ordered_json rec;
    rec["id"] = p.id;
    rec["text"] = p.text;
    if (p.label) rec["label"] = *p.label;
    out += rec.dump();
    out.push_back('\n');
  }
  return out;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  detail::write_file(path, dataset_to_jsonl(ds));
}

// ---------------------------------------------------------------------------
// Prefix / PrefixSet

enum class Role { kAgreement, kRefusal };

inline std::string_view to_string(Role r) {
  return r == Role::kAgreement ? "agreement" : "refusal";
}

struct Prefix {
  TokenSeq tokens;
  std::string text;  // display only; leading whitespace is significant
  Role role = Role::kAgreement;
  std::optional<double> delta;  // separation measured at search time (nats)

  std::size_t length() const { return tokens.size(); }

  void validate() const {
    if (tokens.empty()) throw InvariantError("prefix '" + text + "' has no tokens");
    if (delta) {
      if (role == Role::kAgreement && !(*delta > 0)) {
        throw InvariantError("agreement prefix '" + text +
                             "' must have positive delta");
      }
      if (role == Role::kRefusal && !(*delta < 0)) {
        throw InvariantError("refusal prefix '" + text +
                             "' must have negative delta");
      }
    }
  }

  friend bool operator==(const Prefix&, const Prefix&) = default;
};

struct PrefixSet {
  std::string model_id;
  std::vector<Prefix> agreement;
  std::vector<Prefix> refusal;
  nlohmann::json created_with;  // null when absent

  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& p : agreement) n += p.length();
    for (const auto& p : refusal) n += p.length();
    return n;
  }
  std::size_t size() const { return agreement.size() + refusal.size(); }

  void validate() const {
    if (agreement.empty()) throw InvariantError("prefix set has no agreement prefixes");
    if (refusal.empty()) throw InvariantError("prefix set has no refusal prefixes");
    std::set<TokenSeq> seen;
    for (const auto* list : {&agreement, &refusal}) {
      const Role expected = list == &agreement ? Role::kAgreement : Role::kRefusal;
      for (const auto& p : *list) {
        p.validate();
        if (p.role != expected) {
          throw InvariantError("prefix '" + p.text + "' listed under " +
                               std::string(to_string(expected)) +
                               " but has role " + std::string(to_string(p.role)));
        }
        if (!seen.insert(p.tokens).second) {
          throw InvariantError("duplicate token sequence for prefix '" +
                               p.text + "'");
        }
      }
    }
  }

  // Same set with the two roles exchanged; deltas are negated so the role
  // invariants still hold.
  PrefixSet swapped() const {
    PrefixSet out = *this;
    std::swap(out.agreement, out.refusal);
    for (auto& p : out.agreement) {
      p.role = Role::kAgreement;
      if (p.delta) p.delta = -*p.delta;
    }
    for (auto& p : out.refusal) {
      p.role = Role::kRefusal;
      if (p.delta) p.delta = -*p.delta;
    }
    return out;
  }

  // First `pairs` prefixes of each role.
  PrefixSet truncated(std::size_t pairs) const {
    PrefixSet out = *this;
    if (out.agreement.size() > pairs) out.agreement.resize(pairs);
    if (out.refusal.size() > pairs) out.refusal.resize(pairs);
    return out;
  }

  friend bool operator==(const PrefixSet&, const PrefixSet&) = default;
};

inline std::string prefix_set_to_string(const PrefixSet& set) {
  set.validate();
  nlohmann::ordered_json doc;
  doc["schema"] = kPrefixSetSchema;
  doc["model_id"] = set.model_id;
  auto dump_list = [](const std::vector<Prefix>& list) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& p : list) {
      nlohmann::ordered_json e;
      e["text"] = p.text;
      e["tokens"] = p.tokens;
      e["delta"] = p.delta ? nlohmann::ordered_json(*p.delta)
                           : nlohmann::ordered_json(nullptr);
      arr.push_back(std::move(e));
    }
    return arr;
  };
  doc["agreement"] = dump_list(set.agreement);
  doc["refusal"] = dump_list(set.refusal);
  doc["created_with"] = nlohmann::ordered_json::parse(set.created_with.dump());
  return doc.dump(2) + "\n";
}

inline PrefixSet prefix_set_from_string(std::string_view content) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(content);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("prefix set is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("schema") || !doc["schema"].is_string()) {
    throw FormatError("prefix set has no schema field");
  }
  if (doc["schema"].get<std::string>() != kPrefixSetSchema) {
    throw FormatError("unsupported prefix set schema '" +
                      doc["schema"].get<std::string>() + "', expected " +
                      std::string(kPrefixSetSchema));
  }
  PrefixSet set;
  try {
    set.model_id = doc.at("model_id").get<std::string>();
    auto read_list = [](const nlohmann::json& arr, Role role) {
      std::vector<Prefix> out;
      for (const auto& e : arr) {
        Prefix p;
        p.text = e.at("text").get<std::string>();
        p.tokens = e.at("tokens").get<TokenSeq>();
        p.role = role;
        if (e.contains("delta") && !e["delta"].is_null()) {
          p.delta = e["delta"].get<double>();
        }
        out.push_back(std::move(p));
      }
      return out;
    };
    set.agreement = read_list(doc.at("agreement"), Role::kAgreement);
    set.refusal = read_list(doc.at("refusal"), Role::kRefusal);
    if (doc.contains("created_with")) set.created_with = doc["created_with"];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed prefix set: ") + e.what());
  }
  set.validate();
  return set;
}

inline void save_prefix_set(const PrefixSet& set, const std::string& path) {
  detail::write_file(path, prefix_set_to_string(set));
}

inline PrefixSet load_prefix_set(const std::string& path) {
  return prefix_set_from_string(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// RunConfig

enum class TemplateMode { kRaw, kChat };

inline std::string_view to_string(TemplateMode m) {
  return m == TemplateMode::kRaw ? "raw" : "chat";
}

inline TemplateMode template_mode_from_string(std::string_view s) {
  if (s == "raw") return TemplateMode::kRaw;
  if (s == "chat") return TemplateMode::kChat;
  throw FormatError("template mode must be 'raw' or 'chat', got '" +
                    std::string(s) + "'");
}

struct SearchParams {
  int top_k = 20;
  int beam_width = 8;
  int max_length = 12;
  int final_per_side = 5;
  int init_per_class = 30;  // prompts per label taken from the init dataset

  void validate() const {
    if (top_k < 2) throw InvariantError("top_k must be >= 2");
    if (beam_width < 2) throw InvariantError("beam_width must be >= 2");
    if (max_length < 1) throw InvariantError("max_length must be >= 1");
    if (final_per_side < 1) throw InvariantError("final_per_side must be >= 1");
    if (init_per_class < 1) throw InvariantError("init_per_class must be >= 1");
  }

  friend bool operator==(const SearchParams&, const SearchParams&) = default;
};

struct RunConfig {
  // "toy:<model file>" or an http(s) endpoint URL.
  std::string backend;
  std::string model_id;
  TemplateMode template_mode = TemplateMode::kRaw;
  std::string prefix_set_path;
  std::string calibration_split;  // held-out dataset used for tau
  double tau = 0.0;
  SearchParams search;
  int concurrency = 4;
  int repetitions = 5;
  double timeout_seconds = 30.0;
  int retries = 3;

  void validate() const {
    if (concurrency < 1) throw InvariantError("concurrency limit must be >= 1");
    if (retries < 1) throw InvariantError("retries must be >= 1");
    if (!(timeout_seconds > 0)) throw InvariantError("timeout must be positive");
    search.validate();
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline nlohmann::ordered_json to_json(const SearchParams& p) {
  return {{"top_k", p.top_k},
          {"beam_width", p.beam_width},
          {"max_length", p.max_length},
          {"final_per_side", p.final_per_side},
          {"init_per_class", p.init_per_class}};
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  return {{"backend", c.backend},
          {"model_id", c.model_id},
          {"template_mode", to_string(c.template_mode)},
          {"prefix_set", c.prefix_set_path},
          {"calibration_split", c.calibration_split},
          {"tau", c.tau},
          {"search", to_json(c.search)},
          {"concurrency", c.concurrency},
          {"repetitions", c.repetitions},
          {"timeout_seconds", c.timeout_seconds},
          {"retries", c.retries}};
}

// Fields absent from `doc` keep their current values in `config`.
inline void merge_json(RunConfig& config, const nlohmann::json& doc) {
  try {
    if (doc.contains("backend")) config.backend = doc["backend"].get<std::string>();
    if (doc.contains("model_id")) config.model_id = doc["model_id"].get<std::string>();
    if (doc.contains("template_mode")) {
      config.template_mode =
          template_mode_from_string(doc["template_mode"].get<std::string>());
    }
    if (doc.contains("prefix_set")) config.prefix_set_path = doc["prefix_set"].get<std::string>();
    if (doc.contains("calibration_split")) {
      config.calibration_split = doc["calibration_split"].get<std::string>();
    }
    if (doc.contains("tau")) config.tau = doc["tau"].get<double>();
    if (doc.contains("concurrency")) config.concurrency = doc["concurrency"].get<int>();
    if (doc.contains("repetitions")) config.repetitions = doc["repetitions"].get<int>();
    if (doc.contains("timeout_seconds")) {
      config.timeout_seconds = doc["timeout_seconds"].get<double>();
    }
    if (doc.contains("retries")) config.retries = doc["retries"].get<int>();
    if (doc.contains("search")) {
      const auto& s = doc["search"];
      auto& p = config.search;
      if (s.contains("top_k")) p.top_k = s["top_k"].get<int>();
      if (s.contains("beam_width")) p.beam_width = s["beam_width"].get<int>();
      if (s.contains("max_length")) p.max_length = s["max_length"].get<int>();
      if (s.contains("final_per_side")) p.final_per_side = s["final_per_side"].get<int>();
      if (s.contains("init_per_class")) p.init_per_class = s["init_per_class"].get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed run config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig config;
  merge_json(config, doc);
  return config;
}

}  // namespace prefixprobe
