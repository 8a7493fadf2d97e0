// Copyright 2026 The rpnforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "rpnforge/anchors.hpp"
#include "rpnforge/batch_norm.hpp"
#include "rpnforge/checkpoint.hpp"
#include "rpnforge/config.hpp"
#include "rpnforge/detector.hpp"
#include "rpnforge/error.hpp"
#include "rpnforge/evaluation.hpp"
#include "rpnforge/geometry.hpp"
#include "rpnforge/gradcheck.hpp"
#include "rpnforge/gradcheck_suite.hpp"
#include "rpnforge/image.hpp"
#include "rpnforge/kitti.hpp"
#include "rpnforge/layers.hpp"
#include "rpnforge/log.hpp"
#include "rpnforge/losses.hpp"
#include "rpnforge/nms.hpp"
#include "rpnforge/optim.hpp"
#include "rpnforge/pipeline.hpp"
#include "rpnforge/residual.hpp"
#include "rpnforge/synthetic.hpp"
#include "rpnforge/tensor.hpp"
