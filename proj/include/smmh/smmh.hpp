#pragma once

#include "smmh/errors.hpp"
#include "smmh/rng.hpp"
#include "smmh/process_model.hpp"
#include "smmh/sampler.hpp"
#include "smmh/changepoint.hpp"
#include "smmh/nelder_mead.hpp"
#include "smmh/estimators.hpp"
#include "smmh/log_space.hpp"
#include "smmh/parallel.hpp"
#include "smmh/em_learner.hpp"
#include "smmh/risk_scorer.hpp"
#include "smmh/evaluation.hpp"
#include "smmh/io.hpp"
#include "smmh/reference_model.hpp"
