#pragma once

#include "condistfl/checkpoint.hpp"
#include "condistfl/config.hpp"
#include "condistfl/conv.hpp"
#include "condistfl/errors.hpp"
#include "condistfl/evaluation.hpp"
#include "condistfl/experiment.hpp"
#include "condistfl/federation.hpp"
#include "condistfl/grad_check.hpp"
#include "condistfl/losses.hpp"
#include "condistfl/ops.hpp"
#include "condistfl/seg_model.hpp"
#include "condistfl/synth_data.hpp"
#include "condistfl/tensor.hpp"
