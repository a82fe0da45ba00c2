#pragma once

#include "xtrend/diffcore/checkpoint.hpp"
#include "xtrend/diffcore/graph.hpp"
#include "xtrend/diffcore/layers.hpp"
#include "xtrend/diffcore/optim.hpp"
