"""Video restoration with joint flow and feature refinement under window attention."""
from .cost_volume import CostVolume, build_cost_volume, cost_volume_oracle
from .data import Dataset, DegradationSpec, degrade, ingest_dataset, synthetic_clip
from .flow import FlowProvider, estimate_flow, synthetic_flow
from .jffr import AttentionMaps, JFFRBlock, LevelState, attention_refine, flow_head, jffr_forward, refine_flow
from .losses import LossWeights, temporal_consistency_loss, total_loss
from .metrics import MetricReport, opw, psnr, ssim
from .network import JFFRANet, NetworkConfig, build_network
from .types import FeatureMap, FlowField, FrameWindow, OcclusionMask, VideoClip, extract_windows, make_clip
from .warp import WarpConfig, compute_occlusion_mask, scale_flow, warp

__version__ = "0.1.0"
