#pragma once

// Umbrella header: test-time attention steering for a frozen toy multimodal
// decoder, plus the synthetic harness around it.

#include "attnsteer/tensor.hpp"
#include "attnsteer/graph.hpp"
#include "attnsteer/gradcheck.hpp"
#include "attnsteer/visprompt.hpp"
#include "attnsteer/model.hpp"
#include "attnsteer/checkpoint.hpp"
#include "attnsteer/energy.hpp"
#include "attnsteer/steering.hpp"
#include "attnsteer/decoding.hpp"
#include "attnsteer/synth.hpp"
#include "attnsteer/train.hpp"
#include "attnsteer/eval.hpp"
#include "attnsteer/heatmap.hpp"
#include "attnsteer/config_file.hpp"
