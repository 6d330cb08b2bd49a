#pragma once

#include "mesograph/errors.hpp"
#include "mesograph/matrix.hpp"
#include "mesograph/autodiff.hpp"
#include "mesograph/csv.hpp"
#include "mesograph/data_model.hpp"
#include "mesograph/spatial_graph.hpp"
#include "mesograph/parallel.hpp"
#include "mesograph/mesograph_net.hpp"
#include "mesograph/metrics.hpp"
#include "mesograph/training.hpp"
#include "mesograph/survival.hpp"
#include "mesograph/explain.hpp"
#include "mesograph/overlay.hpp"
#include "mesograph/checkpoint.hpp"
#include "mesograph/synth.hpp"
