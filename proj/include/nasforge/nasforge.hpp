#pragma once
// Umbrella header for the whole library.

#include "nasforge/checkpoint.hpp"
#include "nasforge/config.hpp"
#include "nasforge/data.hpp"
#include "nasforge/evolution.hpp"
#include "nasforge/genotype_io.hpp"
#include "nasforge/hashing.hpp"
#include "nasforge/metrics.hpp"
#include "nasforge/operators.hpp"
#include "nasforge/parallel.hpp"
#include "nasforge/pim.hpp"
#include "nasforge/pruning.hpp"
#include "nasforge/ranking.hpp"
#include "nasforge/rng.hpp"
#include "nasforge/search_space.hpp"
#include "nasforge/supernet.hpp"
#include "nasforge/tensor.hpp"
#include "nasforge/trainer.hpp"
