#pragma once

// Umbrella header for the position-aware correspondence registration library.

#include "pacr/attention.hpp"
#include "pacr/config.hpp"
#include "pacr/error.hpp"
#include "pacr/features.hpp"
#include "pacr/geometry.hpp"
#include "pacr/io.hpp"
#include "pacr/kdtree.hpp"
#include "pacr/matcher.hpp"
#include "pacr/metrics.hpp"
#include "pacr/posenc.hpp"
#include "pacr/rng.hpp"
#include "pacr/scenegen.hpp"
#include "pacr/solver.hpp"
#include "pacr/trainer.hpp"
