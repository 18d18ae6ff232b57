#pragma once

#include "promptblend/error.hpp"
#include "promptblend/rng.hpp"
#include "promptblend/tensor.hpp"
#include "promptblend/optim.hpp"
#include "promptblend/text.hpp"
#include "promptblend/dataset.hpp"
#include "promptblend/checkpoint.hpp"
#include "promptblend/frozen_lm.hpp"
#include "promptblend/composer.hpp"
#include "promptblend/trainer.hpp"
#include "promptblend/report.hpp"
