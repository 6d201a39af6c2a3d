#pragma once

#include "blockprune/allocator.hpp"
#include "blockprune/audit.hpp"
#include "blockprune/bench.hpp"
#include "blockprune/container.hpp"
#include "blockprune/curves.hpp"
#include "blockprune/dataset.hpp"
#include "blockprune/error.hpp"
#include "blockprune/fisher.hpp"
#include "blockprune/model.hpp"
#include "blockprune/pipeline.hpp"
#include "blockprune/power.hpp"
#include "blockprune/rng.hpp"
#include "blockprune/scoring.hpp"
#include "blockprune/tensor.hpp"
#include "blockprune/train.hpp"
