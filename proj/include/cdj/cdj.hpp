#pragma once

// Umbrella header for the whole library.

#include "cdj/autodiff.hpp"
#include "cdj/checkpoint.hpp"
#include "cdj/config.hpp"
#include "cdj/dataset.hpp"
#include "cdj/losses.hpp"
#include "cdj/network.hpp"
#include "cdj/nn_ops.hpp"
#include "cdj/probes.hpp"
#include "cdj/reports.hpp"
#include "cdj/rng.hpp"
#include "cdj/table.hpp"
#include "cdj/tensor.hpp"
#include "cdj/trainer.hpp"
