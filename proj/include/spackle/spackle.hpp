#pragma once

// Umbrella header.

#include "spackle/block.hpp"
#include "spackle/checkpoint.hpp"
#include "spackle/dataset.hpp"
#include "spackle/errors.hpp"
#include "spackle/evaluate.hpp"
#include "spackle/hex.hpp"
#include "spackle/masking.hpp"
#include "spackle/model.hpp"
#include "spackle/optimizer.hpp"
#include "spackle/parallel.hpp"
#include "spackle/preprocess.hpp"
#include "spackle/provenance.hpp"
#include "spackle/rng.hpp"
#include "spackle/synthetic.hpp"
#include "spackle/train.hpp"
#include "spackle/tsv.hpp"
