#pragma once

#include "mocpose/autodiff_nn.hpp"
#include "mocpose/cauchy_mixture.hpp"
#include "mocpose/common.hpp"
#include "mocpose/denoiser.hpp"
#include "mocpose/diffusion.hpp"
#include "mocpose/geometry.hpp"
#include "mocpose/metrics.hpp"
#include "mocpose/observation.hpp"
#include "mocpose/pipeline.hpp"
#include "mocpose/pose_solver.hpp"
#include "mocpose/rng.hpp"
