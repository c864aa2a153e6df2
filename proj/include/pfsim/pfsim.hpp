#pragma once

// Umbrella header for the numerical library. The pipeline (pfsim/pipeline.hpp)
// is separate because it links OpenSSL for provenance hashes.

#include "pfsim/errors.hpp"
#include "pfsim/random.hpp"
#include "pfsim/parallel.hpp"
#include "pfsim/stats.hpp"
#include "pfsim/dists.hpp"
#include "pfsim/mcmc.hpp"
#include "pfsim/optimize.hpp"
#include "pfsim/gp.hpp"
#include "pfsim/kriging.hpp"
#include "pfsim/tuning.hpp"
#include "pfsim/failure.hpp"
#include "pfsim/csv.hpp"
#include "pfsim/ingest.hpp"
#include "pfsim/serialize.hpp"
