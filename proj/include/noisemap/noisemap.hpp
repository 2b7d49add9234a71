#pragma once

// Convenience header pulling in the whole library.

#include "noisemap/checkpoint.hpp"
#include "noisemap/dataset.hpp"
#include "noisemap/error.hpp"
#include "noisemap/eval.hpp"
#include "noisemap/fusion.hpp"
#include "noisemap/loss.hpp"
#include "noisemap/model.hpp"
#include "noisemap/ops.hpp"
#include "noisemap/optim.hpp"
#include "noisemap/pipeline.hpp"
#include "noisemap/raster.hpp"
#include "noisemap/rng.hpp"
#include "noisemap/synth.hpp"
#include "noisemap/tensor.hpp"
#include "noisemap/trainer.hpp"
#include "noisemap/transitions.hpp"
