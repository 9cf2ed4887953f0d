#pragma once

#include "prefixprobe/backends.hpp"
#include "prefixprobe/bench.hpp"
#include "prefixprobe/core.hpp"
#include "prefixprobe/eval.hpp"
#include "prefixprobe/provider.hpp"
#include "prefixprobe/remote_provider.hpp"
#include "prefixprobe/scoring.hpp"
#include "prefixprobe/search.hpp"
#include "prefixprobe/synthetic.hpp"
#include "prefixprobe/toy_model.hpp"
