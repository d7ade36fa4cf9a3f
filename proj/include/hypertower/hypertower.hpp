#pragma once

#include "hypertower/charts.hpp"
#include "hypertower/config.hpp"
#include "hypertower/dynamics.hpp"
#include "hypertower/hoelder.hpp"
#include "hypertower/nicedomain.hpp"
#include "hypertower/pipeline.hpp"
#include "hypertower/pseudo.hpp"
#include "hypertower/regularity.hpp"
#include "hypertower/report.hpp"
#include "hypertower/shadow.hpp"
#include "hypertower/stats.hpp"
#include "hypertower/tower.hpp"
