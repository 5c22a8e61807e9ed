"""Correlation propagation on node lattices: forward iteration, recursive
gradients, greedy path inference, a Markov clustering baseline and the
oriented-box detection tail."""

__version__ = "0.1.0"

from .cp import (ClusterAssignment, ConfidenceState, cp_run, cp_step, dense_transition_matrix,
                 extract_centers, init_one_hot)
from .geometry import (BoxGeometry, DetectionMetrics, OrientedBox, assemble_boxes,
                       decode_geometry, encode_geometry, evaluate, iou, merge_by_center, nms,
                       pca_box_from_cluster)
from .gps import TrapMap, combined_vector_field, gps_infer, greedy_paths, merge_close_candidates
from .labels import SceneLabels, label_scene
from .lattice import (CorrelationField, Lattice, build_lattice, load_field, neighbors,
                      normalize_field, save_field)
from .learn import (LossReport, TrainConfig, center_loss, center_set, finite_difference_grad,
                    recursive_gradients, total_loss, train)
from .mcl import (FlowLabels, FlowMatrix, McCounters, build_flow_matrix, mc_clusters,
                  mc_gradients, mc_iterate, mc_loss)
from .synth import SceneConfig, SyntheticScene, generate_scene, ideal_field, load_scene

__all__ = [
    "BoxGeometry", "CorrelationField", "ClusterAssignment", "ConfidenceState", "DetectionMetrics",
    "FlowLabels", "FlowMatrix", "Lattice", "LossReport", "McCounters", "OrientedBox",
    "SceneConfig", "SceneLabels", "SyntheticScene", "TrainConfig", "TrapMap",
    "assemble_boxes", "build_flow_matrix", "build_lattice", "center_loss", "center_set",
    "combined_vector_field", "cp_run", "cp_step", "decode_geometry", "dense_transition_matrix",
    "encode_geometry", "evaluate", "extract_centers", "finite_difference_grad", "generate_scene",
    "gps_infer", "greedy_paths", "ideal_field", "init_one_hot", "iou", "label_scene",
    "load_field", "load_scene", "mc_clusters", "mc_gradients", "mc_iterate", "mc_loss",
    "merge_by_center", "merge_close_candidates", "neighbors", "nms", "normalize_field",
    "pca_box_from_cluster", "recursive_gradients", "save_field", "total_loss", "train",
]
