#pragma once

#include "pmqve/ablation.hpp"
#include "pmqve/autograd.hpp"
#include "pmqve/config.hpp"
#include "pmqve/distill.hpp"
#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/io.hpp"
#include "pmqve/parallel.hpp"
#include "pmqve/rng.hpp"
#include "pmqve/search.hpp"
#include "pmqve/tensor.hpp"
#include "pmqve/toyzoo.hpp"
