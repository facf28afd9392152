// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "socfree/checkpoint.hpp"
#include "socfree/common.hpp"
#include "socfree/config.hpp"
#include "socfree/grad.hpp"
#include "socfree/policy.hpp"
#include "socfree/problem.hpp"
#include "socfree/problems/follmer.hpp"
#include "socfree/problems/funnel.hpp"
#include "socfree/problems/linear_ou.hpp"
#include "socfree/problems/lqr.hpp"
#include "socfree/rng.hpp"
#include "socfree/sampling.hpp"
#include "socfree/simulate.hpp"
#include "socfree/time_grid.hpp"
#include "socfree/train.hpp"
#include "socfree/wiener.hpp"
