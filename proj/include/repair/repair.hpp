#pragma once

// Umbrella header. experiment.hpp and manifest.hpp additionally need
// json.hpp on the include path and OpenSSL libcrypto at link time.

#include "repair/errors.hpp"
#include "repair/dataset.hpp"
#include "repair/io.hpp"
#include "repair/batching.hpp"
#include "repair/softmax.hpp"
#include "repair/bias_meter.hpp"
#include "repair/repair_solver.hpp"
#include "repair/resampler.hpp"
#include "repair/biasgen.hpp"
#include "repair/downstream.hpp"
