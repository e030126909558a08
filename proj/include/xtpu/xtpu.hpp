#pragma once

#include "xtpu/aging.hpp"
#include "xtpu/assignment.hpp"
#include "xtpu/dataset.hpp"
#include "xtpu/error.hpp"
#include "xtpu/error_model.hpp"
#include "xtpu/model.hpp"
#include "xtpu/parallel.hpp"
#include "xtpu/random.hpp"
#include "xtpu/sensitivity.hpp"
#include "xtpu/systolic.hpp"
