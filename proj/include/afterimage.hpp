#pragma once

#include <afterimage/address.hpp>
#include <afterimage/cache.hpp>
#include <afterimage/core.hpp>
#include <afterimage/csv.hpp>
#include <afterimage/experiments.hpp>
#include <afterimage/oracle_fuzz.hpp>
#include <afterimage/prefetcher.hpp>
#include <afterimage/programs.hpp>
#include <afterimage/reference_prefetcher.hpp>
#include <afterimage/sidechannel.hpp>
#include <afterimage/trace.hpp>
