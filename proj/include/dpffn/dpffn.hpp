#pragma once

#include "dpffn/dataset.hpp"
#include "dpffn/error.hpp"
#include "dpffn/experiments.hpp"
#include "dpffn/gradcheck.hpp"
#include "dpffn/gradsuite.hpp"
#include "dpffn/loss.hpp"
#include "dpffn/metrics.hpp"
#include "dpffn/model.hpp"
#include "dpffn/nn.hpp"
#include "dpffn/ops.hpp"
#include "dpffn/radar.hpp"
#include "dpffn/rng.hpp"
#include "dpffn/synth.hpp"
#include "dpffn/tensor.hpp"
#include "dpffn/train.hpp"
