#pragma once

#include "ladabert/analysis.hpp"
#include "ladabert/budget.hpp"
#include "ladabert/bundle.hpp"
#include "ladabert/csv.hpp"
#include "ladabert/distill.hpp"
#include "ladabert/error.hpp"
#include "ladabert/factorize.hpp"
#include "ladabert/hybrid.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/model.hpp"
#include "ladabert/optimizer.hpp"
#include "ladabert/pipeline.hpp"
#include "ladabert/prune.hpp"
#include "ladabert/random.hpp"
#include "ladabert/svd.hpp"
#include "ladabert/task.hpp"
#include "ladabert/training.hpp"
