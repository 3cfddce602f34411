# Pinhole projection and the depth-normalised crop
#
# Points are projected with the depth camera intrinsics. The crop around the
# hand root shrinks with distance, so the hand covers a similar area at any depth.

import numpy as np

from handtrack.camera import Frame, RootLocation, backproject, crop, crop_side, default_camera, project

camera = default_camera()
print(camera)

uv = project(camera, [100.0, 0.0, 500.0])
print("projected:", uv)
print("back again:", backproject(camera, (uv[0], uv[1], 500.0)))

for z in (300, 500, 1000, 2000):
    print(f"root at {z} mm -> crop side {crop_side(camera, z)} px")

# A synthetic frame: a tilted depth plane with random colour.
rng = np.random.default_rng(1)
v, u = np.mgrid[:camera.height, :camera.width]
depth = (600 + 0.5 * (u - camera.cx)).astype(np.float32)
color = rng.integers(0, 256, (camera.height, camera.width, 3), dtype=np.uint8)
out = crop(Frame(color, depth), RootLocation(160, 120, 600), camera)
print("crop tensor:", out.data.shape, "depth range relative to root:",
      out.data[..., 3].min(), out.data[..., 3].max())
