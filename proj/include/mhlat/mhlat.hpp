#pragma once

#include "mhlat/autodiff.hpp"
#include "mhlat/checkpoint.hpp"
#include "mhlat/chunking.hpp"
#include "mhlat/data.hpp"
#include "mhlat/decoder.hpp"
#include "mhlat/encoder.hpp"
#include "mhlat/gradcheck.hpp"
#include "mhlat/metrics.hpp"
#include "mhlat/model.hpp"
#include "mhlat/multi_hop.hpp"
#include "mhlat/param_store.hpp"
#include "mhlat/tensor.hpp"
#include "mhlat/trainer.hpp"
