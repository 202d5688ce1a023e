// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "analysis.hpp"
#include "attention.hpp"
#include "backbone.hpp"
#include "checkpoint_adapter.hpp"
#include "container.hpp"
#include "editing.hpp"
#include "errors.hpp"
#include "guidance.hpp"
#include "hashing.hpp"
#include "image.hpp"
#include "inversion.hpp"
#include "pipeline.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"
#include "toy_backbone.hpp"
