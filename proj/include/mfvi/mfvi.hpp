#pragma once

#include "mfvi/analysis.hpp"
#include "mfvi/data_model.hpp"
#include "mfvi/meanfield_ode.hpp"
#include "mfvi/quadrature.hpp"
#include "mfvi/rng.hpp"
#include "mfvi/trainers.hpp"
#include "mfvi/vi_core.hpp"
