#pragma once

#include "gpabc/rng.hpp"
#include "gpabc/kernels.hpp"
#include "gpabc/integrators.hpp"
#include "gpabc/models.hpp"
#include "gpabc/dataset.hpp"
#include "gpabc/gp.hpp"
#include "gpabc/abcsmc.hpp"
#include "gpabc/harness.hpp"
