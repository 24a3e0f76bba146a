"""Corrective-force 3D point-cloud anomaly detection.

Pipeline: pseudo-anomaly generation on normal training clouds, a sparse-voxel
encoder/bottleneck/decoder network with complementary gated skip connections
predicting per-point corrective forces, force-magnitude anomaly scoring, and a
two-stage hierarchical quality-control cascade over a pruned and a full model.
"""

from cfad.geometry import PointCloud, VoxelGrid, PatchIndex
from cfad.dagen import DaGenParams, PseudoAnomalySample, generate_anomalies
from cfad.network import NetworkConfig, CfpNet, ForcePrediction
from cfad.losses import LossConfig, combined_loss
from cfad.scoring import ScoreResult, HqcConfig, score_cloud, restore, hqc_run

__version__ = "0.1.0"
