#pragma once

namespace r3 {

// One video voxel: a seconds bucket plus a bounding box in the unit square.
struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
};

struct VoxelToken {
  int t = 0;  // seconds bucket
  Box box;
};

}  // namespace r3
