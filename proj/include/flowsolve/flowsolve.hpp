// Copyright 2026 The flowsolve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "flowsolve/core.hpp"
#include "flowsolve/paths.hpp"
#include "flowsolve/models.hpp"
#include "flowsolve/gmm.hpp"
#include "flowsolve/operators.hpp"
#include "flowsolve/guidance.hpp"
#include "flowsolve/oracle.hpp"
#include "flowsolve/solver.hpp"
#include "flowsolve/io.hpp"
#include "flowsolve/metrics.hpp"
#include "flowsolve/config.hpp"
#include "flowsolve/experiment.hpp"
