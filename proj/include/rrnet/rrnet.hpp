// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rrnet/errors.hpp"
#include "rrnet/numerics.hpp"
#include "rrnet/layers.hpp"
#include "rrnet/recurrent.hpp"
#include "rrnet/architectures.hpp"
#include "rrnet/data.hpp"
#include "rrnet/training.hpp"
#include "rrnet/evaluation.hpp"
#include "rrnet/gradcheck.hpp"
#include "rrnet/pipeline.hpp"
