// Copyright 2026 The KStar Authors
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

#include "kstar/error.hpp"

namespace kstar {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedXml: return "MalformedXml";
    case ErrorCode::MissingLink: return "MissingLink";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::UnsupportedJointKind: return "UnsupportedJointKind";
    case ErrorCode::UnknownModel: return "UnknownModel";
    case ErrorCode::NotConnected: return "NotConnected";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::Unreachable: return "Unreachable";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::InconsistentSlices: return "InconsistentSlices";
    case ErrorCode::BadRange: return "BadRange";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::BadLambda: return "BadLambda";
    case ErrorCode::HistoryLengthMismatch: return "HistoryLengthMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyTrajectory: return "EmptyTrajectory";
    case ErrorCode::ExpertFailed: return "ExpertFailed";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::ArmAssignment: return "ArmAssignment";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

}  // namespace kstar
