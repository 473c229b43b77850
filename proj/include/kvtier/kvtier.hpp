// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "kvtier/attention.hpp"
#include "kvtier/baselines.hpp"
#include "kvtier/config.hpp"
#include "kvtier/costmodel.hpp"
#include "kvtier/experiment.hpp"
#include "kvtier/properties.hpp"
#include "kvtier/quantize.hpp"
#include "kvtier/replay.hpp"
#include "kvtier/rng.hpp"
#include "kvtier/scoring.hpp"
#include "kvtier/stats.hpp"
#include "kvtier/tier_manager.hpp"
#include "kvtier/trace_io.hpp"
#include "kvtier/types.hpp"
#include "kvtier/workload.hpp"
