#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "gnr/pipeline.hpp"
#include "gnr/tensor.hpp"

namespace gnr {

/// Reads an 8-bit PNG as a (channels, H, W) tensor in [-1, 1]. Channels 1..3
/// come from the color planes; a 4th channel comes from alpha (opaque when the
/// file has none).
Tensor read_png(const std::filesystem::path& path, int channels);

/// Writes a (1|3|4, H, W) tensor in [-1, 1] as gray, RGB or RGBA. Values are
/// clipped; `upscale` repeats pixels for tiny images.
void write_png(const std::filesystem::path& path, const Tensor& image, int upscale = 1);

/// Lays out equally sized panels in a grid with a white border between them.
Tensor tile_grid(const std::vector<Tensor>& panels, int columns, int pad = 1);

/// Log-scale plot of the CFG and guider gradient squared norms per step.
void write_norm_curves_svg(std::ostream& out, const std::vector<StepDiagnostics>& diagnostics);

}  // namespace gnr
