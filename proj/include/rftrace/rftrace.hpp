#pragma once

#include "rftrace/clicksim.hpp"
#include "rftrace/dataset.hpp"
#include "rftrace/error.hpp"
#include "rftrace/exec.hpp"
#include "rftrace/graph.hpp"
#include "rftrace/io.hpp"
#include "rftrace/mask.hpp"
#include "rftrace/metrics.hpp"
#include "rftrace/models.hpp"
#include "rftrace/rect.hpp"
#include "rftrace/report.hpp"
#include "rftrace/rft.hpp"
#include "rftrace/segnet.hpp"
#include "rftrace/tensor.hpp"
#include "rftrace/weights.hpp"
