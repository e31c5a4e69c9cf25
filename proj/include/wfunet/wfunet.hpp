#pragma once

#include "wfunet/checkpoint.hpp"
#include "wfunet/dataset.hpp"
#include "wfunet/error.hpp"
#include "wfunet/evaluation.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/layers.hpp"
#include "wfunet/model_core.hpp"
#include "wfunet/model_fusion.hpp"
#include "wfunet/synthetic.hpp"
#include "wfunet/tensor.hpp"
#include "wfunet/timeutil.hpp"
#include "wfunet/training.hpp"
#include "wfunet/pipeline.hpp"
