#pragma once

#include <acreg/autocontext.hpp>
#include <acreg/config.hpp>
#include <acreg/errors.hpp>
#include <acreg/loss.hpp>
#include <acreg/metrics.hpp>
#include <acreg/nifti.hpp>
#include <acreg/optimizer.hpp>
#include <acreg/parallel.hpp>
#include <acreg/phantom.hpp>
#include <acreg/transform.hpp>
#include <acreg/volume.hpp>
