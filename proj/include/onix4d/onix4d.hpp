#pragma once

#include "onix4d/autodiff.hpp"
#include "onix4d/config.hpp"
#include "onix4d/evaluation.hpp"
#include "onix4d/experiment.hpp"
#include "onix4d/geometry.hpp"
#include "onix4d/gradcheck.hpp"
#include "onix4d/gradcheck_suite.hpp"
#include "onix4d/grid.hpp"
#include "onix4d/io.hpp"
#include "onix4d/log.hpp"
#include "onix4d/metrics.hpp"
#include "onix4d/model.hpp"
#include "onix4d/params.hpp"
#include "onix4d/phantom.hpp"
#include "onix4d/physics.hpp"
#include "onix4d/pipeline.hpp"
#include "onix4d/rng.hpp"
#include "onix4d/sart.hpp"
#include "onix4d/tensor.hpp"
#include "onix4d/training.hpp"
