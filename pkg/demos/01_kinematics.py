# Forward kinematics and the pose Jacobian
#
# The hand model has 21 joints and 26 degrees of freedom: a global translation
# (mm), a global rotation and 20 joint angles. This walks through evaluating the
# model and checking its Jacobian against finite differences.

import numpy as np

from handtrack.skeleton import NUM_DOF, fk_jacobian, forward_kinematics, load_skeleton, random_pose

skeleton = load_skeleton()
print("joints:", skeleton.names)

# A rest pose placed half a metre in front of the camera.
pose = np.zeros(NUM_DOF)
pose[2] = 500.0
rest = forward_kinematics(skeleton, pose)
print("wrist at", rest[0], "middle fingertip at", rest[12])

# Any pose keeps the bone lengths fixed.
rng = np.random.default_rng(0)
pose = random_pose(skeleton, rng)
pos = forward_kinematics(skeleton, pose)
bones = np.linalg.norm(pos[1:] - pos[skeleton.parents[1:]], axis=1)
print("max bone-length drift (mm):", np.abs(bones - skeleton.bone_lengths).max())

# The Jacobian is analytical; compare one column with a central difference.
J = fk_jacobian(skeleton, pose)
col, h = 10, 1e-6
e = np.zeros(NUM_DOF)
e[col] = h
fd = (forward_kinematics(skeleton, pose + e) - forward_kinematics(skeleton, pose - e)) / (2 * h)
print("column", col, "max |analytic - fd|:", np.abs(J[:, col] - fd.ravel()).max())
