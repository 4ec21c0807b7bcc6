// Umbrella header.
#pragma once

#include "facmic/core.hpp"
#include "facmic/feature_store.hpp"
#include "facmic/attention_net.hpp"
#include "facmic/losses.hpp"
#include "facmic/optimizer.hpp"
#include "facmic/evaluation.hpp"
#include "facmic/federation.hpp"
#include "facmic/config.hpp"
#include "facmic/artifacts.hpp"
#include "facmic/runner.hpp"
