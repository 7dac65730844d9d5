#pragma once

#include "geomamba/checkpoint.hpp"
#include "geomamba/config.hpp"
#include "geomamba/eval.hpp"
#include "geomamba/experiments.hpp"
#include "geomamba/gradcheck.hpp"
#include "geomamba/gradcheck_suite.hpp"
#include "geomamba/imgproc.hpp"
#include "geomamba/losses.hpp"
#include "geomamba/model.hpp"
#include "geomamba/nn.hpp"
#include "geomamba/ops.hpp"
#include "geomamba/png_io.hpp"
#include "geomamba/rng.hpp"
#include "geomamba/ssm.hpp"
#include "geomamba/svg.hpp"
#include "geomamba/synthdata.hpp"
#include "geomamba/tensor.hpp"
#include "geomamba/trainer.hpp"
