// SPDX-License-Identifier: Apache-2.0
// Umbrella header for the whole toolkit.
#pragma once

#include "violet/array.hpp"
#include "violet/autograd.hpp"
#include "violet/checkpoint.hpp"
#include "violet/downstream.hpp"
#include "violet/error.hpp"
#include "violet/image_io.hpp"
#include "violet/masking.hpp"
#include "violet/model.hpp"
#include "violet/mvm_targets.hpp"
#include "violet/objectives.hpp"
#include "violet/optim.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"
#include "violet/trainer.hpp"
