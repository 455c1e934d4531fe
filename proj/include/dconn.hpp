#pragma once

#include "dconn/checkpoint.hpp"
#include "dconn/corpus.hpp"
#include "dconn/da_model.hpp"
#include "dconn/error.hpp"
#include "dconn/eval.hpp"
#include "dconn/nn.hpp"
#include "dconn/rng.hpp"
#include "dconn/tensor.hpp"
#include "dconn/text.hpp"
#include "dconn/version.hpp"
#include "dconn/wordpairs.hpp"
