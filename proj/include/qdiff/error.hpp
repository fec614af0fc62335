// Copyright 2026 The qdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qdiff {

enum class ErrorKind {
  kShape,
  kNumeric,
  kParameter,
  kState,
  kTraining,
  kSampling,
  kCalibration,
  kConfig,
  kIo,
  kBadMagic,
  kUnknownVersion,
  kTruncated,
  kCrcMismatch,
  kDuplicateName,
  kUsage,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kParameter: return "parameter";
    case ErrorKind::kState: return "state";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kSampling: return "sampling";
    case ErrorKind::kCalibration: return "calibration";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kBadMagic: return "bad_magic";
    case ErrorKind::kUnknownVersion: return "unknown_version";
    case ErrorKind::kTruncated: return "truncated";
    case ErrorKind::kCrcMismatch: return "crc_mismatch";
    case ErrorKind::kDuplicateName: return "duplicate_name";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace qdiff
