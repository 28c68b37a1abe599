#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "neurocell/errors.hpp"

namespace neurocell {

/// Ordinals follow the row order of the confusion-matrix reports.
enum class CellClass : int { Excitatory = 0, Glial = 1, Inhibitory = 2 };

inline constexpr std::size_t kNumCellClasses = 3;
inline constexpr std::array<CellClass, 3> kAllCellClasses = {CellClass::Excitatory, CellClass::Glial,
                                                            CellClass::Inhibitory};

inline const char* cell_class_name(CellClass c) {
  switch (c) {
    case CellClass::Excitatory: return "Excitatory";
    case CellClass::Glial: return "Glial";
    case CellClass::Inhibitory: return "Inhibitory";
  }
  return "?";
}

inline CellClass parse_cell_class(std::string_view name) {
  for (CellClass c : kAllCellClasses) {
    if (name == cell_class_name(c)) return c;
  }
  if (name == "0") return CellClass::Excitatory;
  if (name == "1") return CellClass::Glial;
  if (name == "2") return CellClass::Inhibitory;
  throw FormatError("unknown cell class '" + std::string(name) + "'");
}

inline std::size_t ordinal(CellClass c) { return static_cast<std::size_t>(c); }
inline CellClass cell_class_from(std::size_t i) {
  if (i >= kNumCellClasses) throw ContractError("cell class ordinal out of range");
  return static_cast<CellClass>(i);
}

}  // namespace neurocell
