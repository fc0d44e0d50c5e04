// Umbrella header.
#pragma once

#include "epsest/core.hpp"
#include "epsest/estimators.hpp"
#include "epsest/model.hpp"
#include "epsest/operators.hpp"
#include "epsest/qp.hpp"
#include "epsest/verify.hpp"
