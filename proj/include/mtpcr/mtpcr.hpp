#pragma once

#include "mtpcr/bev.hpp"
#include "mtpcr/cloud.hpp"
#include "mtpcr/cloud_io.hpp"
#include "mtpcr/config.hpp"
#include "mtpcr/error.hpp"
#include "mtpcr/eval.hpp"
#include "mtpcr/ground.hpp"
#include "mtpcr/image_io.hpp"
#include "mtpcr/lift.hpp"
#include "mtpcr/match2d.hpp"
#include "mtpcr/pipeline.hpp"
#include "mtpcr/scene.hpp"
#include "mtpcr/solve.hpp"
#include "mtpcr/spatial_index.hpp"
