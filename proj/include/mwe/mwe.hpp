#pragma once

#include "mwe/errors.hpp"
#include "mwe/experiment.hpp"
#include "mwe/geometry.hpp"
#include "mwe/io.hpp"
#include "mwe/metrics.hpp"
#include "mwe/simulate.hpp"
#include "mwe/solvers.hpp"
#include "mwe/transport_simplex.hpp"
#include "mwe/uot.hpp"
