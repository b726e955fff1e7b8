#pragma once

#include "suede/checkpoint.hpp"
#include "suede/config.hpp"
#include "suede/data.hpp"
#include "suede/encoder.hpp"
#include "suede/gradcheck.hpp"
#include "suede/metrics.hpp"
#include "suede/moe.hpp"
#include "suede/prompts.hpp"
#include "suede/rng.hpp"
#include "suede/tensor.hpp"
#include "suede/train.hpp"
