#pragma once

// Deterministic n-gram reference model with add-alpha smoothing, and a
// provider that serves it with an emulated prompt cache and work counters.

#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixprobe/core.hpp"
#include "prefixprobe/provider.hpp"

namespace prefixprobe {

inline constexpr std::string_view kToyModelSchema = "toy_ngram_v1";

// Splits on whitespace and detaches the punctuation marks , . ! ? ; : from
// words. Apostrophes stay inside words ("I'm", "can't").
inline std::vector<std::string> toy_tokenize(std::string_view text) {
  auto is_punct = [](char c) {
    return c == ',' || c == '.' || c == '!' || c == '?' || c == ';' || c == ':';
  };
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

class ToyModel {
 public:
  // Context slot before the first token of a sequence.
  static constexpr TokenId kPad = -1;
  // Context slot for a prompt word outside the vocabulary.
  static constexpr TokenId kUnknown = -2;

  struct ContextCounts {
    std::uint64_t total = 0;
    std::map<TokenId, std::uint64_t> next;

    friend bool operator==(const ContextCounts&, const ContextCounts&) = default;
  };

  ToyModel(std::vector<std::string> vocabulary, int order, double alpha)
      : vocabulary_(std::move(vocabulary)), order_(order), alpha_(alpha) {
    if (order_ < 1) throw InvariantError("n-gram order must be >= 1");
    if (!(alpha_ > 0) || !std::isfinite(alpha_)) {
      throw InvariantError("smoothing alpha must be positive");
    }
    if (vocabulary_.empty()) throw InvariantError("vocabulary is empty");
    for (std::size_t i = 0; i < vocabulary_.size(); ++i) {
      if (!index_.emplace(vocabulary_[i], static_cast<TokenId>(i)).second) {
        throw InvariantError("duplicate vocabulary entry '" + vocabulary_[i] + "'");
      }
    }
  }

  // A model with no counts: every conditional is 1/|V|.
  static ToyModel uniform(std::vector<std::string> vocabulary, int order = 3,
                          double alpha = 0.1) {
    return ToyModel(std::move(vocabulary), order, alpha);
  }

  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  std::size_t vocab_size() const { return vocabulary_.size(); }
  int order() const { return order_; }
  double alpha() const { return alpha_; }
  const std::map<TokenSeq, ContextCounts>& counts() const { return counts_; }

  std::optional<TokenId> find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool valid_token(TokenId t) const {
    return t >= 0 && static_cast<std::size_t>(t) < vocabulary_.size();
  }

  // The (order-1)-slot context ending at the end of `history`.
  TokenSeq context_of(std::span<const TokenId> history) const {
    const auto width = static_cast<std::size_t>(order_ - 1);
    TokenSeq ctx(width, kPad);
    const std::size_t take = std::min(width, history.size());
    std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(),
              ctx.end() - static_cast<std::ptrdiff_t>(take));
    return ctx;
  }

  std::uint64_t count(const TokenSeq& context, TokenId next) const {
    auto it = counts_.find(context);
    if (it == counts_.end()) return 0;
    auto jt = it->second.next.find(next);
    return jt == it->second.next.end() ? 0 : jt->second;
  }

  std::uint64_t context_total(const TokenSeq& context) const {
    auto it = counts_.find(context);
    return it == counts_.end() ? 0 : it->second.total;
  }

  // log p(next | history) = log((c(ctx,next) + a) / (c(ctx) + a|V|)).
  double log_conditional(std::span<const TokenId> history, TokenId next) const {
    if (!valid_token(next)) {
      throw InvalidTokenError("token id " + std::to_string(next) +
                              " outside vocabulary of size " +
                              std::to_string(vocabulary_.size()));
    }
    const TokenSeq ctx = context_of(history);
    const auto V = static_cast<double>(vocabulary_.size());
    return std::log((static_cast<double>(count(ctx, next)) + alpha_) /
                    (static_cast<double>(context_total(ctx)) + alpha_ * V));
  }

  // Full next-token log-distribution after `history`, indexed by token id.
  std::vector<double> log_distribution(std::span<const TokenId> history) const {
    const TokenSeq ctx = context_of(history);
    const auto V = static_cast<double>(vocabulary_.size());
    const double denom = static_cast<double>(context_total(ctx)) + alpha_ * V;
    std::vector<double> out(vocabulary_.size());
    auto it = counts_.find(ctx);
    for (std::size_t t = 0; t < out.size(); ++t) {
      std::uint64_t c = 0;
      if (it != counts_.end()) {
        auto jt = it->second.next.find(static_cast<TokenId>(t));
        if (jt != it->second.next.end()) c = jt->second;
      }
      out[t] = std::log((static_cast<double>(c) + alpha_) / denom);
    }
    return out;
  }

  // Words to ids; words outside the vocabulary map to kUnknown.
  TokenSeq encode_lenient(std::string_view text) const {
    TokenSeq ids;
    for (const auto& w : toy_tokenize(text)) {
      auto id = find(w);
      ids.push_back(id ? *id : kUnknown);
    }
    return ids;
  }

  TokenSeq encode_strict(std::string_view text) const {
    TokenSeq ids;
    for (const auto& w : toy_tokenize(text)) {
      auto id = find(w);
      if (!id) throw InvalidTokenError("word '" + w + "' is not in the toy vocabulary");
      ids.push_back(*id);
    }
    return ids;
  }

  // Each token rendered with a leading space, as subword vocabularies do.
  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) {
      if (!valid_token(t)) {
        throw InvalidTokenError("token id " + std::to_string(t) + " outside vocabulary");
      }
      out.push_back(' ');
      out += vocabulary_[static_cast<std::size_t>(t)];
    }
    return out;
  }

  void add_sequence(std::span<const TokenId> ids) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto& cc = counts_[context_of(ids.first(i))];
      ++cc.total;
      ++cc.next[ids[i]];
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json doc;
    doc["schema"] = kToyModelSchema;
    doc["order"] = order_;
    doc["alpha"] = alpha_;
    doc["vocabulary"] = vocabulary_;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& [ctx, cc] : counts_) {
      for (const auto& [next, n] : cc.next) {
        rows.push_back({{"context", ctx}, {"next", next}, {"count", n}});
      }
    }
    doc["counts"] = std::move(rows);
    return doc;
  }

  static ToyModel from_json(const nlohmann::json& doc) {
    try {
      if (doc.at("schema").get<std::string>() != kToyModelSchema) {
        throw FormatError("unsupported toy model schema");
      }
      ToyModel m(doc.at("vocabulary").get<std::vector<std::string>>(),
                 doc.at("order").get<int>(), doc.at("alpha").get<double>());
      for (const auto& row : doc.at("counts")) {
        auto ctx = row.at("context").get<TokenSeq>();
        const auto next = row.at("next").get<TokenId>();
        const auto n = row.at("count").get<std::uint64_t>();
        if (ctx.size() != static_cast<std::size_t>(m.order_ - 1) ||
            !m.valid_token(next) || n == 0) {
          throw FormatError("toy model count row is inconsistent with the model");
        }
        for (TokenId c : ctx) {
          if (c != kPad && !m.valid_token(c)) {
            throw FormatError("toy model context id out of range");
          }
        }
        auto& cc = m.counts_[ctx];
        cc.total += n;
        cc.next[next] += n;
      }
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed toy model: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    detail::write_file(path, to_json().dump(1) + "\n");
  }

  static ToyModel load(const std::string& path) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("toy model '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(doc);
  }

  friend bool operator==(const ToyModel& a, const ToyModel& b) {
    return a.vocabulary_ == b.vocabulary_ && a.order_ == b.order_ &&
           a.alpha_ == b.alpha_ && a.counts_ == b.counts_;
  }

 private:
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, TokenId> index_;
  int order_;
  double alpha_;
  std::map<TokenSeq, ContextCounts> counts_;
};

// Vocabulary in first-appearance order; one sequence per corpus line.
inline ToyModel train_toy_model(const std::vector<std::string>& corpus,
                                int order = 3, double alpha = 0.1) {
  if (corpus.empty()) throw InvariantError("toy model corpus is empty");
  if (order < 1) throw InvariantError("n-gram order must be >= 1");
  if (!(alpha > 0) || !std::isfinite(alpha)) {
    throw InvariantError("smoothing alpha must be positive");
  }
  std::vector<std::string> vocab;
  std::unordered_set<std::string> seen;
  std::vector<std::vector<std::string>> lines;
  lines.reserve(corpus.size());
  for (const auto& line : corpus) {
    lines.push_back(toy_tokenize(line));
    for (const auto& w : lines.back()) {
      if (seen.insert(w).second) vocab.push_back(w);
    }
  }
  if (vocab.empty()) throw InvariantError("toy model corpus has no tokens");
  ToyModel model(std::move(vocab), order, alpha);
  for (const auto& words : lines) {
    TokenSeq ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(*model.find(w));
    model.add_sequence(ids);
  }
  return model;
}

// Serves a ToyModel. Keeps the set of prompts whose state is "cached" and
// counts the tokens it had to process, so the prompt-cache cost model can be
// checked exactly.
class ToyProvider : public LogProbProvider {
 public:
  struct WorkCounters {
    std::uint64_t prompt_tokens = 0;  // prompt positions recomputed
    std::uint64_t prefix_tokens = 0;  // probe positions computed
    std::uint64_t probes = 0;
    std::uint64_t cache_hits = 0;
  };

  explicit ToyProvider(std::shared_ptr<const ToyModel> model,
                       std::string model_id = "toy")
      : model_(std::move(model)), model_id_(std::move(model_id)) {
    if (!model_) throw InvariantError("toy provider needs a model");
  }
  explicit ToyProvider(ToyModel model, std::string model_id = "toy")
      : ToyProvider(std::make_shared<const ToyModel>(std::move(model)),
                    std::move(model_id)) {}

  const ToyModel& model() const { return *model_; }
  std::string model_id() const override { return model_id_; }

  LogProbResult logprobs(const LogProbQuery& query) const override {
    const auto start = std::chrono::steady_clock::now();
    for (TokenId t : query.prefix_tokens) {
      if (!model_->valid_token(t)) {
        throw InvalidTokenError("token id " + std::to_string(t) +
                                " outside toy vocabulary");
      }
    }
    TokenSeq history = model_->encode_lenient(query.prompt_text);
    const std::size_t t_base = history.size();
    LogProbResult r;
    r.prompt_token_count = t_base;
    r.served_from_cache = account(query.prompt_text, t_base,
                                  query.prefix_tokens.size(), query.cache_hint);
    r.per_token.reserve(query.prefix_tokens.size());
    for (TokenId t : query.prefix_tokens) {
      r.per_token.push_back(model_->log_conditional(history, t));
      history.push_back(t);
    }
    r.wall_time = std::chrono::steady_clock::now() - start;
    return r;
  }

  std::vector<TokenLogProb> next_token_logprobs(std::string_view prompt_text,
                                                std::span<const TokenId> prefix,
                                                CacheHint hint) const override {
    for (TokenId t : prefix) {
      if (!model_->valid_token(t)) {
        throw InvalidTokenError("token id " + std::to_string(t) +
                                " outside toy vocabulary");
      }
    }
    TokenSeq history = model_->encode_lenient(prompt_text);
    account(prompt_text, history.size(), prefix.size(), hint);
    history.insert(history.end(), prefix.begin(), prefix.end());
    const auto dist = model_->log_distribution(history);
    std::vector<TokenLogProb> out;
    out.reserve(dist.size());
    for (std::size_t t = 0; t < dist.size(); ++t) {
      out.push_back({static_cast<TokenId>(t), dist[t]});
    }
    return out;
  }

  TokenSeq tokenize(std::string_view text) const override {
    return model_->encode_strict(text);
  }
  std::string detokenize(std::span<const TokenId> tokens) const override {
    return model_->decode(tokens);
  }

  WorkCounters counters() const {
    return {prompt_tokens_.load(), prefix_tokens_.load(), probes_.load(),
            cache_hits_.load()};
  }
  void reset_counters() {
    prompt_tokens_ = 0;
    prefix_tokens_ = 0;
    probes_ = 0;
    cache_hits_ = 0;
  }
  void clear_cache() {
    std::lock_guard lock(cache_mutex_);
    cache_.clear();
  }

 private:
  // Returns true when the prompt's state was reused.
  bool account(std::string_view prompt, std::size_t t_base,
               std::size_t prefix_len, CacheHint hint) const {
    bool hit = false;
    if (hint == CacheHint::kReuse) {
      std::lock_guard lock(cache_mutex_);
      hit = !cache_.insert(std::string(prompt)).second;
    }
    probes_.fetch_add(1);
    prefix_tokens_.fetch_add(prefix_len);
    if (hit) {
      cache_hits_.fetch_add(1);
    } else {
      prompt_tokens_.fetch_add(t_base);
    }
    return hit;
  }

  std::shared_ptr<const ToyModel> model_;
  std::string model_id_;
  mutable std::mutex cache_mutex_;
  mutable std::unordered_set<std::string> cache_;
  mutable std::atomic<std::uint64_t> prompt_tokens_{0};
  mutable std::atomic<std::uint64_t> prefix_tokens_{0};
  mutable std::atomic<std::uint64_t> probes_{0};
  mutable std::atomic<std::uint64_t> cache_hits_{0};
};

}  // namespace prefixprobe
