// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "reusevit/bench.hpp"
#include "reusevit/error.hpp"
#include "reusevit/flops.hpp"
#include "reusevit/frame_type.hpp"
#include "reusevit/io.hpp"
#include "reusevit/ops.hpp"
#include "reusevit/reuse.hpp"
#include "reusevit/runtime.hpp"
#include "reusevit/scheduler.hpp"
#include "reusevit/store.hpp"
#include "reusevit/synth.hpp"
#include "reusevit/tensor.hpp"
#include "reusevit/trainer.hpp"
#include "reusevit/vit.hpp"
