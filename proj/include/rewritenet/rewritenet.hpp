#pragma once

#include "rewritenet/assignment.hpp"
#include "rewritenet/checkpoint.hpp"
#include "rewritenet/discrete.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/fst_compile.hpp"
#include "rewritenet/gradcheck.hpp"
#include "rewritenet/kvconfig.hpp"
#include "rewritenet/model.hpp"
#include "rewritenet/optim.hpp"
#include "rewritenet/rewrite_layer.hpp"
#include "rewritenet/rng.hpp"
#include "rewritenet/tasks.hpp"
#include "rewritenet/tensor.hpp"
#include "rewritenet/training.hpp"
