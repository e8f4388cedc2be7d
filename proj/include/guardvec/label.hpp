// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace guardvec {

// Binary safety label. UNSAFE is the positive class everywhere.
enum class Label : uint8_t { Safe, Unsafe };

const char* label_name(Label l);
std::optional<Label> label_from_name(std::string_view name);

}  // namespace guardvec
