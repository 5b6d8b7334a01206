/* Copyright 2026 The flatlora Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */
#pragma once

#include "flatlora/errors.hpp"
#include "flatlora/linalg.hpp"
#include "flatlora/rng.hpp"
#include "flatlora/model.hpp"
#include "flatlora/optimizers.hpp"
#include "flatlora/diagnostics.hpp"
#include "flatlora/config.hpp"
#include "flatlora/tasks.hpp"
#include "flatlora/experiment.hpp"
#include "flatlora/bench.hpp"
#include "flatlora/verify.hpp"
