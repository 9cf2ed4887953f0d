#pragma once

// Builds a provider from a backend descriptor: "toy:<model file>" or an
// http:// endpoint URL.

#include <memory>
#include <string>

#include "prefixprobe/core.hpp"
#include "prefixprobe/remote_provider.hpp"
#include "prefixprobe/toy_model.hpp"

namespace prefixprobe {

inline constexpr std::string_view kToyScheme = "toy:";

inline std::shared_ptr<LogProbProvider> make_provider(const RunConfig& config) {
  const auto& b = config.backend;
  if (b.empty()) throw InvariantError("no backend configured (use --backend-url)");
  if (b.rfind(kToyScheme, 0) == 0) {
    auto model = std::make_shared<const ToyModel>(
        ToyModel::load(b.substr(kToyScheme.size())));
    return std::make_shared<ToyProvider>(
        std::move(model), config.model_id.empty() ? "toy" : config.model_id);
  }
  RemoteOptions opts;
  opts.template_mode = config.template_mode;
  opts.attempts = config.retries;
  opts.timeout_seconds = config.timeout_seconds;
  return std::make_shared<RemoteProvider>(b, config.model_id, opts);
}

}  // namespace prefixprobe
