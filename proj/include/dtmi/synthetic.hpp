#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dtmi {

// Writes `count` deterministic RGB-D scenes under out_dir (rgb/, depth/,
// gt/ plus manifest.json) and returns the ids. Each scene has a smooth
// background gradient, up to two camouflaged distractor shapes, and one
// salient shape that is always nearest the camera; the GT mask covers
// exactly the salient shape. A third of the scenes camouflage the salient
// shape in RGB (depth disambiguates), a third nearly flatten the depth
// contrast between salient shape and distractors (color disambiguates).
std::vector<std::string> generate_synthetic_dataset(int count, std::uint64_t seed, int size,
                                                    const std::string& out_dir);

}  // namespace dtmi
