// mtkws/mtkws.hpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef MTKWS_MTKWS_HPP
#define MTKWS_MTKWS_HPP

#include "mtkws/adapt.hpp"
#include "mtkws/audio.hpp"
#include "mtkws/backbone.hpp"
#include "mtkws/common.hpp"
#include "mtkws/config.hpp"
#include "mtkws/corpus.hpp"
#include "mtkws/evalkit.hpp"
#include "mtkws/mixing.hpp"
#include "mtkws/pipeline.hpp"
#include "mtkws/pretrain.hpp"
#include "mtkws/rng.hpp"
#include "mtkws/tokenizer.hpp"

#endif  // MTKWS_MTKWS_HPP
