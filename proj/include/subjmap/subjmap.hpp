#pragma once

#include "subjmap/errors.hpp"
#include "subjmap/rng.hpp"
#include "subjmap/linalg.hpp"
#include "subjmap/layers.hpp"
#include "subjmap/models.hpp"
#include "subjmap/dataset.hpp"
#include "subjmap/datagen.hpp"
#include "subjmap/digest.hpp"
#include "subjmap/config_types.hpp"
#include "subjmap/optim.hpp"
#include "subjmap/eval.hpp"
#include "subjmap/stats.hpp"
#include "subjmap/ica.hpp"
#include "subjmap/analysis.hpp"
#include "subjmap/checkpoint.hpp"
#include "subjmap/experiment.hpp"
