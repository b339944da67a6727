#pragma once

// Umbrella header.

#include "sttree/attention.hpp"
#include "sttree/checkpoint.hpp"
#include "sttree/config.hpp"
#include "sttree/encoder.hpp"
#include "sttree/errors.hpp"
#include "sttree/explainer.hpp"
#include "sttree/gradcheck.hpp"
#include "sttree/model.hpp"
#include "sttree/ops.hpp"
#include "sttree/rng.hpp"
#include "sttree/tensor.hpp"
#include "sttree/trainer.hpp"
#include "sttree/tree.hpp"
#include "sttree/ts_data.hpp"
