#pragma once

#include "heightbins/errors.hpp"
#include "heightbins/tensor.hpp"
#include "heightbins/ops.hpp"
#include "heightbins/special.hpp"
#include "heightbins/params.hpp"
#include "heightbins/optim.hpp"
#include "heightbins/nn.hpp"
#include "heightbins/seed.hpp"
#include "heightbins/backbone.hpp"
#include "heightbins/transformer.hpp"
#include "heightbins/binset.hpp"
#include "heightbins/regression.hpp"
#include "heightbins/htc_adabins.hpp"
#include "heightbins/distributions.hpp"
#include "heightbins/losses.hpp"
#include "heightbins/model.hpp"
#include "heightbins/metrics.hpp"
#include "heightbins/raster.hpp"
#include "heightbins/synth.hpp"
#include "heightbins/config.hpp"
#include "heightbins/training.hpp"
#include "heightbins/gradcheck.hpp"
#include "heightbins/ablation.hpp"
