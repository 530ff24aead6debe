#pragma once

#include "facefit/grid.hpp"
#include "facefit/mesh.hpp"
#include "facefit/camera.hpp"
#include "facefit/lighting.hpp"
#include "facefit/rasterizer.hpp"
#include "facefit/render.hpp"
#include "facefit/model.hpp"
#include "facefit/losses.hpp"
#include "facefit/fitting.hpp"
#include "facefit/synthetic.hpp"
#include "facefit/io.hpp"
#include "facefit/gradcheck.hpp"
