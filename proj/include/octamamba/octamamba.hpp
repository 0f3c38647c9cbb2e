#pragma once

#include "octamamba/tensor.hpp"
#include "octamamba/ops.hpp"
#include "octamamba/activation.hpp"
#include "octamamba/conv.hpp"
#include "octamamba/norm.hpp"
#include "octamamba/ssm_scan.hpp"
#include "octamamba/wavelet.hpp"
#include "octamamba/attention.hpp"
#include "octamamba/param_store.hpp"
#include "octamamba/net.hpp"
#include "octamamba/train.hpp"
#include "octamamba/gradcheck.hpp"
#include "octamamba/io.hpp"
