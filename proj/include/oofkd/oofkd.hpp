// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "oofkd/bench.hpp"
#include "oofkd/cache.hpp"
#include "oofkd/config.hpp"
#include "oofkd/data.hpp"
#include "oofkd/eval.hpp"
#include "oofkd/experiment.hpp"
#include "oofkd/gbdt.hpp"
#include "oofkd/labeling.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/mlp.hpp"
#include "oofkd/synthetic.hpp"
#include "oofkd/teachers.hpp"
