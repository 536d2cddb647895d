#pragma once

// Umbrella header for the core library (everything except image decoding,
// which lives in nxfr/image_io.hpp).

#include "nxfr/checkpoint.hpp"
#include "nxfr/dataset.hpp"
#include "nxfr/errors.hpp"
#include "nxfr/kernels.hpp"
#include "nxfr/model.hpp"
#include "nxfr/report.hpp"
#include "nxfr/rng.hpp"
#include "nxfr/synthetic.hpp"
#include "nxfr/tensor.hpp"
#include "nxfr/train.hpp"
#include "nxfr/transfer.hpp"
