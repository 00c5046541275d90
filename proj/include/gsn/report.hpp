// Copyright 2026 The gsn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <string>

namespace gsn {

using json = nlohmann::json;

/// Outcome of a structural or numerical check.
struct Report {
  std::string check;
  bool pass = true;
  double margin = std::numeric_limits<double>::quiet_NaN();
  json witnesses = json::array();
  json values = json::object();

  void fail(json witness) {
    pass = false;
    witnesses.push_back(std::move(witness));
  }
};

inline json to_json(const Report& r) {
  json j;
  j["check"] = r.check;
  j["pass"] = r.pass;
  j["margin"] = std::isfinite(r.margin) ? json(r.margin) : json(nullptr);
  j["witnesses"] = r.witnesses;
  if (!r.values.empty()) j["values"] = r.values;
  return j;
}

}  // namespace gsn
