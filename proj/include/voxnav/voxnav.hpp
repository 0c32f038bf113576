// Umbrella header.
#pragma once

#include "voxnav/common.hpp"
#include "voxnav/voxgrid.hpp"
#include "voxnav/planner.hpp"
#include "voxnav/world.hpp"
#include "voxnav/tensor.hpp"
#include "voxnav/layers.hpp"
#include "voxnav/nets.hpp"
#include "voxnav/expert.hpp"
#include "voxnav/checkpoint.hpp"
#include "voxnav/train.hpp"
#include "voxnav/eval.hpp"
#include "voxnav/experiment.hpp"
