# Which energy terms matter
#
# Tracking with only the 2D term has no depth anchor and drifts far away;
# the 3D term alone is close to the full energy on this benchmark.

from handtrack.camera import default_camera
from handtrack.evaluation import ablation_csv, ablation_report
from handtrack.skeleton import load_skeleton
from handtrack.synth import SynthConfig, generate_sequence

skeleton, camera = load_skeleton(), default_camera()
obs, gt = generate_sequence(skeleton, camera, SynthConfig(sequence_length=100, occlusion_rate=0.1, seed=0))

rows = ablation_report(skeleton, obs, gt, camera, sequence="seed0")
print(ablation_csv(rows))
