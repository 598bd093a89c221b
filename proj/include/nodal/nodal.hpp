#pragma once

#include "aperture.hpp"
#include "aperture_mask.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "hash.hpp"
#include "hullbound.hpp"
#include "matrix.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "train.hpp"
