#pragma once

// Everything in one include.

#include "d2ae/analytics/features.hpp"
#include "d2ae/analytics/probe.hpp"
#include "d2ae/analytics/report.hpp"
#include "d2ae/analytics/stats.hpp"
#include "d2ae/analytics/verification.hpp"
#include "d2ae/autodiff/grad_check.hpp"
#include "d2ae/data/dataset.hpp"
#include "d2ae/editing/editing.hpp"
#include "d2ae/interface/service.hpp"
#include "d2ae/model/d2ae_model.hpp"
#include "d2ae/objective/losses.hpp"
#include "d2ae/objective/train.hpp"
#include "d2ae/persistence/checkpoint.hpp"
