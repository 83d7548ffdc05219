"""Writes include/protomil/viridis_lut.hpp from matplotlib's viridis table."""
import pathlib

from matplotlib import colormaps

cmap = colormaps["viridis"].resampled(256)
rows = []
for i in range(256):
    r, g, b, _ = cmap(i)
    rows.append("{%d, %d, %d}" % (round(r * 255), round(g * 255), round(b * 255)))

body = ",\n    ".join(", ".join(rows[i:i + 6]) for i in range(0, 256, 6))
text = f"""#pragma once

#include <array>
#include <cstdint>

// Generated by tools/gen_viridis_lut.py.
namespace protomil {{

inline constexpr std::array<std::array<std::uint8_t, 3>, 256> kViridis = {{{{
    {body}}}}};

}}  // namespace protomil
"""
out = pathlib.Path(__file__).resolve().parent.parent / "include" / "protomil" / "viridis_lut.hpp"
out.write_text(text)
