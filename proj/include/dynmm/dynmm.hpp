#pragma once

#include "dynmm/tensor.hpp"
#include "dynmm/ops.hpp"
#include "dynmm/nn.hpp"
#include "dynmm/gating.hpp"
#include "dynmm/cost.hpp"
#include "dynmm/modality_moe.hpp"
#include "dynmm/fusion_net.hpp"
#include "dynmm/data.hpp"
#include "dynmm/metrics.hpp"
#include "dynmm/trainer.hpp"
#include "dynmm/config.hpp"
#include "dynmm/checkpoint.hpp"
#include "dynmm/harness.hpp"
