#pragma once

// Umbrella header.

#include "rrs/common.hpp"
#include "rrs/corpus.hpp"
#include "rrs/eval.hpp"
#include "rrs/finetune.hpp"
#include "rrs/model.hpp"
#include "rrs/optim.hpp"
#include "rrs/pipeline.hpp"
#include "rrs/pretrain.hpp"
#include "rrs/rng.hpp"
#include "rrs/safety_vector.hpp"
#include "rrs/tensor_io.hpp"
#include "rrs/viz.hpp"
#include "rrs/vocab.hpp"
