#pragma once

#include "spatlas/atlas.hpp"
#include "spatlas/diffeo.hpp"
#include "spatlas/error.hpp"
#include "spatlas/filters.hpp"
#include "spatlas/io.hpp"
#include "spatlas/metrics.hpp"
#include "spatlas/morphology.hpp"
#include "spatlas/objective.hpp"
#include "spatlas/parallel.hpp"
#include "spatlas/phantom.hpp"
#include "spatlas/vbm.hpp"
#include "spatlas/volume.hpp"
